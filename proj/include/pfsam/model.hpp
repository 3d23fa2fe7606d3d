#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfsam/graph.hpp"
#include "pfsam/params.hpp"

namespace pfsam::model {

enum class Activation { kRelu, kSigmoid };

struct ModelConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t num_classes = 0;
  Activation activation = Activation::kRelu;
  double head_bias_init = 0.0;

  void validate() const;
  std::size_t param_count() const;
  // Canonical content hash; checkpoints refuse to load under a different one.
  std::uint64_t hash() const;
};

// Fan-in-scaled uniform init (bound sqrt(6/(fan_in+fan_out))). Biases start
// at zero except the classification head, which starts at head_bias_init.
// Deterministic per seed.
ParameterVector init_params(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardNodes {
  diff::NodeId logits = -1;
  std::vector<diff::NodeId> leaves;  // one per segment, in segment order
};

// Builds the forward pass into an existing graph, rooting parameter leaves at
// the given values so gradients are obtainable via Graph::backward.
ForwardNodes forward_into(diff::Graph& g, const ModelConfig& cfg,
                          const ParameterVector& params, const diff::Tensor& X);

struct Forward {
  diff::Graph graph;
  ForwardNodes nodes;
};

Forward forward(const ModelConfig& cfg, const ParameterVector& params,
                const diff::Tensor& X);

// Pure inference: logits values only, no graph kept.
diff::Tensor forward_values(const ModelConfig& cfg, const ParameterVector& params,
                            const diff::Tensor& X);

struct Checkpoint {
  ParameterVector params;
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  nlohmann::json optimizer_state;  // opaque snapshot, may be null
};

// Binary value block ("PFSAMCKP" magic, u64 count, little-endian f64 values)
// plus a ".meta.json" sidecar with the hash, segments, step and seed.
// save -> load round trips bit-exactly.
void save(const Checkpoint& cp, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);
Checkpoint load_checked(const std::filesystem::path& path, const ModelConfig& cfg);

std::filesystem::path meta_path(const std::filesystem::path& checkpoint_path);

}  // namespace pfsam::model
