#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuronalloc/allocation.hpp"
#include "neuronalloc/importance.hpp"
#include "neuronalloc/mask.hpp"
#include "neuronalloc/model.hpp"

namespace nalloc {

// Every artifact is serialized to a byte string first; the file fingerprint
// is the content hash of those bytes, and downstream artifacts store the
// fingerprints of their inputs, so mixing files from different runs fails at
// load time. All writes go through a temp file plus rename.

void write_file_atomic(const std::string& path, std::string_view bytes);
std::string read_file(const std::string& path);

// ---- checkpoints (binary): magic, version, config, seed, step, parent
// fingerprint, then named little-endian float32 parameter blocks.

struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  // Fingerprint of the pretraining checkpoint this model descends from
  // (0 for the pretraining checkpoint itself). Lets plans made against the
  // pretrained model keep validating against its fine-tuned descendants.
  std::uint64_t parent_fingerprint = 0;
  std::vector<std::pair<std::string, std::vector<float>>> params;
};

Checkpoint snapshot(const TransformerModel& model, std::int64_t step,
                    std::uint64_t parent_fingerprint);
// Rebuilds the model from config + seed, then overwrites parameter values.
TransformerModel restore(const Checkpoint& ckpt);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// Returns the checkpoint and its content fingerprint.
struct LoadedCheckpoint {
  Checkpoint ckpt;
  std::uint64_t fingerprint = 0;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// ---- importance tables (text): one header line, then
// "side layer site unit score_1 .. score_M" per neuron.

std::string encode_table(const ImportanceTable& table, const RegistryDims& dims,
                         std::uint64_t checkpoint_fingerprint);
struct LoadedTable {
  ImportanceTable table;
  RegistryDims dims;
  std::uint64_t checkpoint_fingerprint = 0;
  std::uint64_t fingerprint = 0;  // of the file bytes
};
LoadedTable decode_table(std::string_view bytes);
void save_table(const ImportanceTable& table, const RegistryDims& dims,
                std::uint64_t checkpoint_fingerprint, const std::string& path);
LoadedTable load_table(const std::string& path);

// ---- allocation plans (text): one header line, then
// "side layer site unit GENERAL" or "... SPECIFIC:pair,pair" per neuron.

std::string encode_plan(const AllocationPlan& plan, const RegistryDims& dims);
struct LoadedPlan {
  AllocationPlan plan;
  RegistryDims dims;
  std::uint64_t fingerprint = 0;
};
LoadedPlan decode_plan(std::string_view bytes);
void save_plan(const AllocationPlan& plan, const RegistryDims& dims,
               const std::string& path);
LoadedPlan load_plan(const std::string& path);

// ---- mask sets (text): one header line, then
// "side layer site unit b_1..b_M" per neuron (one 0/1 digit per pair).

std::string encode_mask_set(const MaskSet& masks, const RegistryDims& dims);
struct LoadedMaskSet {
  MaskSet masks;
  RegistryDims dims;
  std::uint64_t fingerprint = 0;
};
LoadedMaskSet decode_mask_set(std::string_view bytes);
void save_mask_set(const MaskSet& masks, const RegistryDims& dims,
                   const std::string& path);
LoadedMaskSet load_mask_set(const std::string& path);

// Shortest round-trip decimal forms used by all text formats.
std::string format_double(double v);
double parse_double(std::string_view s);

}  // namespace nalloc
