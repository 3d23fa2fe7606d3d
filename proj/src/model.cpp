#include "pfsam/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "pfsam/util.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace pfsam::model {

void ModelConfig::validate() const {
  if (input_dim == 0) throw ConfigError("model: input_dim must be positive");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  for (std::size_t h : hidden_dims)
    if (h == 0) throw ConfigError("model: hidden dims must be positive");
  if (!std::isfinite(head_bias_init))
    throw ConfigError("model: head_bias_init must be finite");
}

std::size_t ModelConfig::param_count() const {
  std::size_t count = 0;
  std::size_t in = input_dim;
  for (std::size_t h : hidden_dims) {
    count += in * h + h;
    in = h;
  }
  count += in * num_classes + num_classes;
  return count;
}

std::uint64_t ModelConfig::hash() const {
  std::ostringstream ss;
  ss << "in=" << input_dim << ";hidden=";
  for (std::size_t h : hidden_dims) ss << h << ",";
  ss << ";classes=" << num_classes
     << ";act=" << (activation == Activation::kRelu ? "relu" : "sigmoid")
     << ";head_bias=" << format_double(head_bias_init);
  return fnv1a64(ss.str());
}

namespace {

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  std::string name;  // "layer<k>" or "head"
};

std::vector<LayerShape> layer_shapes(const ModelConfig& cfg) {
  std::vector<LayerShape> shapes;
  std::size_t in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.hidden_dims.size(); ++l) {
    shapes.push_back({in, cfg.hidden_dims[l], "layer" + std::to_string(l)});
    in = cfg.hidden_dims[l];
  }
  shapes.push_back({in, cfg.num_classes, "head"});
  return shapes;
}

std::vector<Segment> make_segments(const ModelConfig& cfg) {
  std::vector<Segment> segments;
  std::size_t offset = 0;
  for (const LayerShape& s : layer_shapes(cfg)) {
    segments.push_back({s.name + ".weight", offset, s.in * s.out});
    offset += s.in * s.out;
    segments.push_back({s.name + ".bias", offset, s.out});
    offset += s.out;
  }
  return segments;
}

}  // namespace

ParameterVector init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<double> values(cfg.param_count(), 0.0);
  ParameterVector params(std::move(values), make_segments(cfg));

  std::mt19937_64 rng(seed);
  auto shapes = layer_shapes(cfg);
  for (const LayerShape& s : shapes) {
    double bound = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& w : params.span(s.name + ".weight")) w = dist(rng);
    if (s.name == "head")
      for (double& b : params.span("head.bias")) b = cfg.head_bias_init;
  }
  return params;
}

ForwardNodes forward_into(diff::Graph& g, const ModelConfig& cfg,
                          const ParameterVector& params, const diff::Tensor& X) {
  cfg.validate();
  if (params.size() != cfg.param_count())
    throw UsageError("forward: parameter count does not match config");
  if (X.cols != cfg.input_dim)
    throw UsageError("forward: input column count does not match config");

  ForwardNodes out;
  diff::NodeId act = g.constant(X);
  auto shapes = layer_shapes(cfg);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const LayerShape& s = shapes[l];
    auto wspan = params.span(s.name + ".weight");
    auto bspan = params.span(s.name + ".bias");
    diff::NodeId w = g.leaf(diff::Tensor(
        s.in, s.out, std::vector<double>(wspan.begin(), wspan.end())));
    diff::NodeId b = g.leaf(diff::Tensor(
        1, s.out, std::vector<double>(bspan.begin(), bspan.end())));
    out.leaves.push_back(w);
    out.leaves.push_back(b);
    diff::NodeId z = g.add(g.matmul(act, w), g.repeat_rows(b, X.rows));
    if (l + 1 < shapes.size()) {
      act = cfg.activation == Activation::kRelu ? g.relu(z) : g.sigmoid(z);
    } else {
      out.logits = z;
    }
  }
  return out;
}

Forward forward(const ModelConfig& cfg, const ParameterVector& params,
                const diff::Tensor& X) {
  Forward f;
  f.nodes = forward_into(f.graph, cfg, params, X);
  return f;
}

diff::Tensor forward_values(const ModelConfig& cfg, const ParameterVector& params,
                            const diff::Tensor& X) {
  Forward f = forward(cfg, params, X);
  return f.graph.value(f.nodes.logits);
}

std::filesystem::path meta_path(const std::filesystem::path& checkpoint_path) {
  std::filesystem::path p = checkpoint_path;
  p.replace_extension(".meta.json");
  return p;
}

namespace {
constexpr char kMagic[8] = {'P', 'F', 'S', 'A', 'M', 'C', 'K', 'P'};
}

void save(const Checkpoint& cp, const std::filesystem::path& path) {
  std::string blob;
  blob.reserve(16 + 8 * cp.params.size());
  blob.append(kMagic, sizeof(kMagic));
  std::uint64_t count = cp.params.size();
  blob.append(reinterpret_cast<const char*>(&count), sizeof(count));
  blob.append(reinterpret_cast<const char*>(cp.params.data()),
              8 * cp.params.size());
  atomic_write_file(path, blob);

  nlohmann::json meta;
  meta["config_hash"] = cp.config_hash;
  meta["step"] = cp.step;
  meta["seed"] = cp.seed;
  meta["segments"] = nlohmann::json::array();
  for (const Segment& s : cp.params.segments())
    meta["segments"].push_back(
        {{"name", s.name}, {"offset", s.offset}, {"extent", s.extent}});
  meta["optimizer_state"] = cp.optimizer_state;
  atomic_write_file(meta_path(path), meta.dump(2) + "\n");
}

Checkpoint load(const std::filesystem::path& path) {
  std::string blob = read_file(path);
  if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("checkpoint: bad magic: " + path.string());
  std::uint64_t count = 0;
  std::memcpy(&count, blob.data() + 8, sizeof(count));
  if (blob.size() != 16 + 8 * count)
    throw FormatError("checkpoint: truncated value block: " + path.string());
  std::vector<double> values(count);
  std::memcpy(values.data(), blob.data() + 16, 8 * count);

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(meta_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: bad metadata sidecar: " + std::string(e.what()));
  }

  std::vector<Segment> segments;
  std::size_t covered = 0;
  for (const auto& s : meta.at("segments")) {
    segments.push_back({s.at("name").get<std::string>(),
                        s.at("offset").get<std::size_t>(),
                        s.at("extent").get<std::size_t>()});
    covered += segments.back().extent;
  }
  if (covered != count)
    throw FormatError("checkpoint: segments do not match value count");

  Checkpoint cp;
  cp.params = ParameterVector(std::move(values), std::move(segments));
  cp.config_hash = meta.at("config_hash").get<std::uint64_t>();
  cp.step = meta.at("step").get<std::uint64_t>();
  cp.seed = meta.at("seed").get<std::uint64_t>();
  cp.optimizer_state = meta.value("optimizer_state", nlohmann::json());
  return cp;
}

Checkpoint load_checked(const std::filesystem::path& path,
                        const ModelConfig& cfg) {
  Checkpoint cp = load(path);
  if (cp.config_hash != cfg.hash())
    throw IncompatibleCheckpointError(
        "checkpoint config hash does not match the requested model");
  if (cp.params.size() != cfg.param_count())
    throw IncompatibleCheckpointError(
        "checkpoint parameter count does not match the requested model");
  return cp;
}

}  // namespace pfsam::model
