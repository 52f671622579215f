#include "neuronalloc/serialize.hpp"

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fmt/format.h>
#include <fstream>
#include <map>
#include <span>
#include <sstream>

namespace nalloc {

namespace {

constexpr std::string_view kCheckpointMagic = "NALCKPT\n";
constexpr std::uint32_t kCheckpointVersion = 1;

// ---- little-endian byte encoding -------------------------------------------

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }
void put_i64(std::string& out, std::int64_t v) { put_u64(out, static_cast<std::uint64_t>(v)); }
void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_str(std::string& out, std::string_view s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    }
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    }
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw data_error("checkpoint file is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

// ---- text format helpers ----------------------------------------------------

std::vector<std::string_view> split_tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string> split_commas(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == ',') {
      if (i > start) out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

// Header lines read "<format> v1 key=value key=value ...".
class HeaderFields {
 public:
  HeaderFields(std::string_view line, std::string_view format) : format_(format) {
    const std::vector<std::string_view> tokens = split_tokens(line);
    if (tokens.size() < 2 || tokens[0] != format || tokens[1] != "v1") {
      throw data_error(fmt::format("not a {} v1 file", format));
    }
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      const std::size_t eq = tokens[i].find('=');
      if (eq == std::string_view::npos) {
        throw data_error(fmt::format("{}: malformed header field '{}'", format, tokens[i]));
      }
      fields_.emplace(tokens[i].substr(0, eq), tokens[i].substr(eq + 1));
    }
  }

  std::string_view get(std::string_view key) const {
    const auto it = fields_.find(key);
    if (it == fields_.end()) {
      throw data_error(fmt::format("{}: header is missing '{}'", format_, key));
    }
    return it->second;
  }

  int get_int(std::string_view key) const {
    const std::string_view v = get(key);
    int out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
      throw data_error(fmt::format("{}: header field {}={} is not an integer", format_, key, v));
    }
    return out;
  }

  std::int64_t get_i64(std::string_view key) const {
    const std::string_view v = get(key);
    std::int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
      throw data_error(fmt::format("{}: header field {}={} is not an integer", format_, key, v));
    }
    return out;
  }

 private:
  std::string format_;
  std::map<std::string_view, std::string_view> fields_;
};

// Reads lines of a text artifact; the final newline is required.
std::vector<std::string_view> split_lines(std::string_view bytes, std::string_view what) {
  if (bytes.empty() || bytes.back() != '\n') {
    throw data_error(fmt::format("{} file does not end with a newline", what));
  }
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] == '\n') {
      lines.push_back(bytes.substr(start, i - start));
      start = i + 1;
    }
  }
  return lines;
}

// Formats a registry row prefix "side layer site unit".
void append_neuron_id(std::string& out, const NeuronId& id) {
  out += side_name(id.side);
  out += ' ';
  out += std::to_string(id.layer);
  out += ' ';
  out += site_name(id.site);
  out += ' ';
  out += std::to_string(id.unit);
}

// Validates one body row against the expected canonical registry position.
void check_neuron_id(std::span<const std::string_view> tokens, const NeuronSiteRegistry& registry,
                     std::size_t flat, std::string_view what) {
  const NeuronId expect = registry.id_at(flat);
  const NeuronId got{parse_side(tokens[0]), 0, parse_site(tokens[2]), 0};
  int layer = 0, unit = 0;
  auto parse_int = [&](std::string_view v, int& out) {
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    return ec == std::errc{} && ptr == v.data() + v.size();
  };
  if (!parse_int(tokens[1], layer) || !parse_int(tokens[3], unit)) {
    throw data_error(fmt::format("{}: malformed neuron row {}", what, flat));
  }
  if (got.side != expect.side || layer != expect.layer || got.site != expect.site ||
      unit != expect.unit) {
    throw data_error(fmt::format("{}: row {} is out of canonical order", what, flat));
  }
}

RegistryDims header_dims(const HeaderFields& header) {
  return RegistryDims{header.get_int("layers"), header.get_int("d_model"),
                      header.get_int("d_ffn")};
}

std::string dims_header(const RegistryDims& dims) {
  return fmt::format("layers={} d_model={} d_ffn={}", dims.num_layers, dims.d_model, dims.d_ffn);
}

std::string join_pairs(const std::vector<std::string>& pairs) {
  std::string out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (i) out += ',';
    out += pairs[i];
  }
  return out;
}

}  // namespace

// ---- files ------------------------------------------------------------------

void write_file_atomic(const std::string& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.parent_path() /
                       (target.filename().string() + fmt::format(".tmp.{}", ::getpid()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw data_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw data_error(fmt::format("cannot move {} into place: {}", tmp.string(), ec.message()));
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (!in.good() && !in.eof()) throw data_error("read failed for " + path);
  return std::move(buf).str();
}

// ---- numbers ----------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw numeric_error("cannot format double");
  return std::string(buf, ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw data_error(fmt::format("'{}' is not a number", s));
  }
  return v;
}

// ---- checkpoints ------------------------------------------------------------

Checkpoint snapshot(const TransformerModel& model, std::int64_t step,
                    std::uint64_t parent_fingerprint) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.seed = model.init_seed();
  ckpt.step = step;
  ckpt.parent_fingerprint = parent_fingerprint;
  for (const Parameter& p : model.params()) {
    ckpt.params.emplace_back(p.name,
                             std::vector<float>(p.tensor.values().begin(), p.tensor.values().end()));
  }
  return ckpt;
}

TransformerModel restore(const Checkpoint& ckpt) {
  TransformerModel model(ckpt.config, ckpt.seed);
  if (ckpt.params.size() != model.params().size()) {
    throw data_error(fmt::format("checkpoint carries {} parameters, model has {}",
                                 ckpt.params.size(), model.params().size()));
  }
  for (const auto& [name, values] : ckpt.params) {
    Parameter& p = model.param(name);
    const std::span<float> dst = p.tensor.mutable_values();
    if (dst.size() != values.size()) {
      throw data_error(fmt::format("checkpoint parameter {} has {} values, model expects {}",
                                   name, values.size(), dst.size()));
    }
    std::copy(values.begin(), values.end(), dst.begin());
  }
  return model;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out;
  out.append(kCheckpointMagic);
  put_u32(out, kCheckpointVersion);

  const ModelConfig& c = ckpt.config;
  put_i32(out, c.num_layers);
  put_i32(out, c.d_model);
  put_i32(out, c.num_heads);
  put_i32(out, c.d_ffn);
  put_i32(out, c.vocab_size);
  put_i32(out, c.max_seq_len);
  put_f32(out, c.dropout_rate);
  put_u8(out, c.share_embeddings ? 1 : 0);
  put_u32(out, static_cast<std::uint32_t>(c.language_pairs.size()));
  for (const std::string& pair : c.language_pairs) put_str(out, pair);

  put_u64(out, ckpt.seed);
  put_i64(out, ckpt.step);
  put_u64(out, ckpt.parent_fingerprint);

  put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, values] : ckpt.params) {
    put_str(out, name);
    put_u64(out, values.size());
    for (float v : values) put_f32(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw data_error("not a checkpoint file");
  }
  ByteReader in(bytes.substr(kCheckpointMagic.size()));
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw data_error(fmt::format("unsupported checkpoint version {}", version));
  }

  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.num_layers = in.i32();
  c.d_model = in.i32();
  c.num_heads = in.i32();
  c.d_ffn = in.i32();
  c.vocab_size = in.i32();
  c.max_seq_len = in.i32();
  c.dropout_rate = in.f32();
  c.share_embeddings = in.u8() != 0;
  const std::uint32_t num_pairs = in.u32();
  for (std::uint32_t i = 0; i < num_pairs; ++i) c.language_pairs.push_back(in.str());
  c.validate();

  ckpt.seed = in.u64();
  ckpt.step = in.i64();
  ckpt.parent_fingerprint = in.u64();

  const std::uint32_t num_params = in.u32();
  for (std::uint32_t i = 0; i < num_params; ++i) {
    std::string name = in.str();
    const std::uint64_t count = in.u64();
    std::vector<float> values;
    values.reserve(count);
    for (std::uint64_t j = 0; j < count; ++j) {
      const float v = in.f32();
      if (!std::isfinite(v)) {
        throw data_error(fmt::format("checkpoint parameter {} holds a non-finite value", name));
      }
      values.push_back(v);
    }
    ckpt.params.emplace_back(std::move(name), std::move(values));
  }
  if (!in.done()) throw data_error("checkpoint file has trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  LoadedCheckpoint loaded;
  loaded.ckpt = decode_checkpoint(bytes);
  loaded.fingerprint = content_fingerprint(bytes);
  return loaded;
}

// ---- importance tables ------------------------------------------------------

std::string encode_table(const ImportanceTable& table, const RegistryDims& dims,
                         std::uint64_t checkpoint_fingerprint) {
  if (!table.finalized()) {
    throw usage_error("cannot serialize an importance table before finalize()");
  }
  const NeuronSiteRegistry registry(dims);
  if (registry.size() != table.registry_size()) {
    throw data_error(fmt::format("table covers {} neurons, registry dims give {}",
                                 table.registry_size(), registry.size()));
  }

  std::string tokens_field;
  for (int m = 0; m < table.num_pairs(); ++m) {
    if (m) tokens_field += ',';
    tokens_field += std::to_string(table.tokens(m));
  }
  std::string out = fmt::format("neuron-table v1 criterion={} {} pairs={} tokens={} ckpt={}\n",
                                criterion_name(table.criterion()), dims_header(dims),
                                join_pairs(table.pairs()), tokens_field,
                                fingerprint_hex(checkpoint_fingerprint));
  for (std::size_t i = 0; i < registry.size(); ++i) {
    append_neuron_id(out, registry.id_at(i));
    for (int m = 0; m < table.num_pairs(); ++m) {
      out += ' ';
      out += format_double(table.score(m, i));
    }
    out += '\n';
  }
  return out;
}

LoadedTable decode_table(std::string_view bytes) {
  const std::vector<std::string_view> lines = split_lines(bytes, "importance table");
  if (lines.empty()) throw data_error("importance table file is empty");
  const HeaderFields header(lines[0], "neuron-table");

  const Criterion criterion = parse_criterion(header.get("criterion"));
  const RegistryDims dims = header_dims(header);
  const NeuronSiteRegistry registry(dims);
  const std::vector<std::string> pairs = split_commas(header.get("pairs"));
  if (pairs.empty()) throw data_error("importance table names no pairs");

  std::vector<std::int64_t> tokens;
  for (const std::string& t : split_commas(header.get("tokens"))) {
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || ptr != t.data() + t.size() || v <= 0) {
      throw data_error(fmt::format("importance table token count '{}' is invalid", t));
    }
    tokens.push_back(v);
  }
  if (tokens.size() != pairs.size()) {
    throw data_error("importance table token counts do not match its pairs");
  }

  if (lines.size() - 1 != registry.size()) {
    throw data_error(fmt::format("importance table has {} rows, registry needs {}",
                                 lines.size() - 1, registry.size()));
  }
  std::vector<std::vector<double>> scores(pairs.size(),
                                          std::vector<double>(registry.size(), 0.0));
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const std::vector<std::string_view> tok = split_tokens(lines[i + 1]);
    if (tok.size() != 4 + pairs.size()) {
      throw data_error(fmt::format("importance table row {} has {} fields, expected {}", i,
                                   tok.size(), 4 + pairs.size()));
    }
    check_neuron_id(tok, registry, i, "importance table");
    for (std::size_t m = 0; m < pairs.size(); ++m) {
      const double v = parse_double(tok[4 + m]);
      if (!std::isfinite(v) || v < 0.0) {
        throw data_error(fmt::format("importance table row {} holds an invalid score", i));
      }
      scores[m][i] = v;
    }
  }

  LoadedTable loaded{ImportanceTable::from_finalized(criterion, pairs, std::move(scores),
                                                     std::move(tokens)),
                     dims, parse_fingerprint(header.get("ckpt")), content_fingerprint(bytes)};
  return loaded;
}

void save_table(const ImportanceTable& table, const RegistryDims& dims,
                std::uint64_t checkpoint_fingerprint, const std::string& path) {
  write_file_atomic(path, encode_table(table, dims, checkpoint_fingerprint));
}

LoadedTable load_table(const std::string& path) { return decode_table(read_file(path)); }

// ---- allocation plans -------------------------------------------------------

std::string encode_plan(const AllocationPlan& plan, const RegistryDims& dims) {
  const NeuronSiteRegistry registry(dims);
  if (registry.size() != plan.registry_size()) {
    throw data_error(fmt::format("plan covers {} neurons, registry dims give {}",
                                 plan.registry_size(), registry.size()));
  }
  const PlanProvenance& prov = plan.provenance;
  std::string out = fmt::format(
      "neuron-plan v1 criterion={} rho={} k={} variant={} {} pairs={} table={} ckpt={}\n",
      criterion_name(prov.criterion), format_double(prov.rho), format_double(prov.k),
      variant_name(prov.variant), dims_header(dims), join_pairs(plan.pairs),
      fingerprint_hex(prov.table_fingerprint), fingerprint_hex(prov.checkpoint_fingerprint));
  for (std::size_t i = 0; i < registry.size(); ++i) {
    append_neuron_id(out, registry.id_at(i));
    out += ' ';
    if (plan.is_general(i)) {
      out += "GENERAL";
    } else {
      out += "SPECIFIC:";
      const std::vector<int>& assigned = plan.specific[i];
      for (std::size_t j = 0; j < assigned.size(); ++j) {
        if (j) out += ',';
        out += plan.pairs[static_cast<std::size_t>(assigned[j])];
      }
    }
    out += '\n';
  }
  return out;
}

LoadedPlan decode_plan(std::string_view bytes) {
  const std::vector<std::string_view> lines = split_lines(bytes, "allocation plan");
  if (lines.empty()) throw data_error("allocation plan file is empty");
  const HeaderFields header(lines[0], "neuron-plan");

  AllocationPlan plan;
  plan.provenance.criterion = parse_criterion(header.get("criterion"));
  plan.provenance.rho = parse_double(header.get("rho"));
  plan.provenance.k = parse_double(header.get("k"));
  plan.provenance.variant = parse_variant(header.get("variant"));
  plan.provenance.table_fingerprint = parse_fingerprint(header.get("table"));
  plan.provenance.checkpoint_fingerprint = parse_fingerprint(header.get("ckpt"));
  plan.pairs = split_commas(header.get("pairs"));
  if (plan.pairs.empty()) throw data_error("allocation plan names no pairs");

  const RegistryDims dims = header_dims(header);
  const NeuronSiteRegistry registry(dims);
  if (lines.size() - 1 != registry.size()) {
    throw data_error(fmt::format("allocation plan has {} rows, registry needs {}",
                                 lines.size() - 1, registry.size()));
  }
  plan.general.assign(registry.size(), 0);
  plan.specific.assign(registry.size(), {});
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const std::vector<std::string_view> tok = split_tokens(lines[i + 1]);
    if (tok.size() != 5) {
      throw data_error(fmt::format("allocation plan row {} has {} fields, expected 5", i,
                                   tok.size()));
    }
    check_neuron_id(tok, registry, i, "allocation plan");
    const std::string_view role = tok[4];
    if (role == "GENERAL") {
      plan.general[i] = 1;
    } else if (role.starts_with("SPECIFIC:")) {
      std::vector<int> assigned;
      for (const std::string& pair : split_commas(role.substr(9))) {
        int m = -1;
        for (std::size_t p = 0; p < plan.pairs.size(); ++p) {
          if (plan.pairs[p] == pair) m = static_cast<int>(p);
        }
        if (m < 0) {
          throw data_error(
              fmt::format("allocation plan row {} assigns unknown pair '{}'", i, pair));
        }
        assigned.push_back(m);
      }
      if (assigned.empty()) {
        throw data_error(fmt::format("allocation plan row {} has an empty specific set", i));
      }
      std::sort(assigned.begin(), assigned.end());
      if (std::adjacent_find(assigned.begin(), assigned.end()) != assigned.end()) {
        throw data_error(fmt::format("allocation plan row {} repeats a pair", i));
      }
      plan.specific[i] = std::move(assigned);
    } else {
      throw data_error(fmt::format("allocation plan row {} has role '{}'", i, role));
    }
  }
  return LoadedPlan{std::move(plan), dims, content_fingerprint(bytes)};
}

void save_plan(const AllocationPlan& plan, const RegistryDims& dims, const std::string& path) {
  write_file_atomic(path, encode_plan(plan, dims));
}

LoadedPlan load_plan(const std::string& path) { return decode_plan(read_file(path)); }

// ---- mask sets ---------------------------------------------------------------

std::string encode_mask_set(const MaskSet& masks, const RegistryDims& dims) {
  const NeuronSiteRegistry registry(dims);
  if (masks.pairs.size() != masks.masks.size()) {
    throw data_error("mask set pairs and masks are out of step");
  }
  for (const Mask& m : masks.masks) {
    if (m.num_blocks() != registry.blocks().size()) {
      throw data_error("mask does not match the registry dims");
    }
  }
  std::string out = fmt::format("neuron-masks v1 {} pairs={} plan={}\n", dims_header(dims),
                                join_pairs(masks.pairs), fingerprint_hex(masks.plan_fingerprint));
  for (std::size_t i = 0; i < registry.size(); ++i) {
    append_neuron_id(out, registry.id_at(i));
    out += ' ';
    for (const Mask& m : masks.masks) out += m.active(registry, i) ? '1' : '0';
    out += '\n';
  }
  return out;
}

LoadedMaskSet decode_mask_set(std::string_view bytes) {
  const std::vector<std::string_view> lines = split_lines(bytes, "mask set");
  if (lines.empty()) throw data_error("mask set file is empty");
  const HeaderFields header(lines[0], "neuron-masks");

  const RegistryDims dims = header_dims(header);
  const NeuronSiteRegistry registry(dims);
  MaskSet masks;
  masks.pairs = split_commas(header.get("pairs"));
  if (masks.pairs.empty()) throw data_error("mask set names no pairs");
  masks.plan_fingerprint = parse_fingerprint(header.get("plan"));
  masks.masks.assign(masks.pairs.size(), Mask::all_active(registry));

  if (lines.size() - 1 != registry.size()) {
    throw data_error(fmt::format("mask set has {} rows, registry needs {}", lines.size() - 1,
                                 registry.size()));
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    const std::vector<std::string_view> tok = split_tokens(lines[i + 1]);
    if (tok.size() != 5) {
      throw data_error(fmt::format("mask set row {} has {} fields, expected 5", i, tok.size()));
    }
    check_neuron_id(tok, registry, i, "mask set");
    const std::string_view bits = tok[4];
    if (bits.size() != masks.pairs.size()) {
      throw data_error(fmt::format("mask set row {} has {} bits for {} pairs", i, bits.size(),
                                   masks.pairs.size()));
    }
    for (std::size_t m = 0; m < bits.size(); ++m) {
      if (bits[m] == '0') {
        masks.masks[m].set(registry, i, false);
      } else if (bits[m] != '1') {
        throw data_error(fmt::format("mask set row {} holds a bit other than 0/1", i));
      }
    }
  }
  return LoadedMaskSet{std::move(masks), dims, content_fingerprint(bytes)};
}

void save_mask_set(const MaskSet& masks, const RegistryDims& dims, const std::string& path) {
  write_file_atomic(path, encode_mask_set(masks, dims));
}

LoadedMaskSet load_mask_set(const std::string& path) {
  return decode_mask_set(read_file(path));
}

}  // namespace nalloc
