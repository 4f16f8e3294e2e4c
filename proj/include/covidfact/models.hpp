#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "covidfact/capsule.hpp"
#include "covidfact/layers.hpp"
#include "json.hpp"

namespace covidfact {

enum class Stage { one, two };

inline std::string to_string(Stage s) { return s == Stage::one ? "one" : "two"; }
inline Stage parse_stage(const std::string& s) {
  if (s == "one" || s == "1") return Stage::one;
  if (s == "two" || s == "2") return Stage::two;
  throw ConfigError("unknown stage '" + s + "' (expected one|two)");
}

// Class-capsule order for both stages: index 0 is the positive class
// (infected slice in stage one, COVID in stage two), index 1 the negative.
inline constexpr std::size_t kPositiveClass = 0;
inline constexpr std::size_t kNegativeClass = 1;

struct CapsDims {
  std::size_t count = 0;
  std::size_t dim = 0;
  friend bool operator==(const CapsDims&, const CapsDims&) = default;
};

// Architecture of one stage. The conv front end is fixed at four layers:
// conv-BN-ReLU, conv-BN-ReLU, conv-ReLU-pool, conv-pool, after which the last
// map is regrouped into primary capsules (`primary_caps.count` capsules per
// spatial position, so count * dim must equal the last conv width).
struct NetworkSpec {
  std::size_t input_h = 32;
  std::size_t input_w = 32;
  std::array<std::size_t, 4> conv_channels{64, 64, 128, 128};
  Window2 kernel{3, 3};
  CapsDims primary_caps{16, 8};
  std::vector<CapsDims> hidden_caps{{16, 8}, {16, 8}};
  CapsDims class_caps{2, 16};
  int routing_iters = 3;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-5;
  std::uint64_t seed = 1;

  static NetworkSpec stage1_default() { return NetworkSpec{}; }
  static NetworkSpec stage2_default() {
    NetworkSpec s;
    s.hidden_caps.clear();
    return s;
  }

  std::size_t feature_h() const { return input_h / 4; }
  std::size_t feature_w() const { return input_w / 4; }
  std::size_t num_primary_capsules() const { return primary_caps.count * feature_h() * feature_w(); }

  void validate() const {
    for (auto c : conv_channels)
      if (c == 0) throw ConfigError("network spec: conv channel counts must be positive");
    if (kernel.h == 0 || kernel.w == 0) throw ConfigError("network spec: kernel must be positive");
    if (primary_caps.count == 0 || primary_caps.dim == 0) throw ConfigError("network spec: primary capsules must be positive");
    if (primary_caps.count * primary_caps.dim != conv_channels[3])
      throw ConfigError("network spec: primary capsules " + std::to_string(primary_caps.count) + "x" +
                        std::to_string(primary_caps.dim) + " do not tile " + std::to_string(conv_channels[3]) +
                        " channels of the last conv layer");
    for (const auto& h : hidden_caps)
      if (h.count == 0 || h.dim == 0) throw ConfigError("network spec: hidden capsule layers must be positive");
    if (class_caps.count != 2) throw ConfigError("network spec: class capsule layer must have exactly 2 capsules");
    if (class_caps.dim == 0) throw ConfigError("network spec: class capsule dimension must be positive");
    if (routing_iters < 1) throw ConfigError("network spec: routing_iters must be >= 1");
    if (!(bn_momentum > 0.0 && bn_momentum < 1.0)) throw ConfigError("network spec: bn_momentum must be in (0,1)");
    if (!(bn_epsilon > 0.0)) throw ConfigError("network spec: bn_epsilon must be positive");
    if (input_h < 4 || input_w < 4)
      throw DimensionError("network spec: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                           " underflows the two 2x2 pooling stages");
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline void to_json(nlohmann::json& j, const CapsDims& c) { j = nlohmann::json::array({c.count, c.dim}); }
inline void from_json(const nlohmann::json& j, CapsDims& c) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("capsule dims must be [count, dim]");
  c.count = j[0].get<std::size_t>();
  c.dim = j[1].get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = nlohmann::json{{"input_size", {s.input_h, s.input_w}},
                     {"conv_channels", s.conv_channels},
                     {"kernel", {s.kernel.h, s.kernel.w}},
                     {"primary_caps", s.primary_caps},
                     {"hidden_caps", s.hidden_caps},
                     {"class_caps", s.class_caps},
                     {"routing_iters", s.routing_iters},
                     {"bn_momentum", s.bn_momentum},
                     {"bn_epsilon", s.bn_epsilon},
                     {"seed", s.seed}};
}

// Missing keys keep the defaults of `s`.
inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
  if (!j.is_object()) throw ConfigError("network spec must be an object");
  for (const auto& [key, _] : j.items()) {
    static const std::array known{"input_size", "conv_channels", "kernel", "primary_caps", "hidden_caps",
                                  "class_caps", "routing_iters", "bn_momentum", "bn_epsilon", "seed"};
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("network spec: unknown key '" + key + "'");
  }
  if (j.contains("input_size")) {
    const auto v = j["input_size"].get<std::vector<std::size_t>>();
    if (v.size() != 2) throw ConfigError("network spec: input_size must be [H, W]");
    s.input_h = v[0];
    s.input_w = v[1];
  }
  if (j.contains("conv_channels")) {
    const auto v = j["conv_channels"].get<std::vector<std::size_t>>();
    if (v.size() != 4) throw ConfigError("network spec: conv_channels must have exactly 4 entries");
    std::copy(v.begin(), v.end(), s.conv_channels.begin());
  }
  if (j.contains("kernel")) {
    const auto v = j["kernel"].get<std::vector<std::size_t>>();
    if (v.size() != 2) throw ConfigError("network spec: kernel must be [h, w]");
    s.kernel = {v[0], v[1]};
  }
  if (j.contains("primary_caps")) s.primary_caps = j["primary_caps"].get<CapsDims>();
  if (j.contains("hidden_caps")) s.hidden_caps = j["hidden_caps"].get<std::vector<CapsDims>>();
  if (j.contains("class_caps")) s.class_caps = j["class_caps"].get<CapsDims>();
  if (j.contains("routing_iters")) s.routing_iters = j["routing_iters"].get<int>();
  if (j.contains("bn_momentum")) s.bn_momentum = j["bn_momentum"].get<double>();
  if (j.contains("bn_epsilon")) s.bn_epsilon = j["bn_epsilon"].get<double>();
  if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
}

// Capsule layer specs implied by a network spec: hidden layers, then the
// two-capsule class layer.
inline std::vector<CapsuleLayerSpec> capsule_layer_specs(const NetworkSpec& s) {
  std::vector<CapsuleLayerSpec> out;
  CapsDims prev{s.num_primary_capsules(), s.primary_caps.dim};
  for (const auto& h : s.hidden_caps) {
    out.push_back({prev.count, prev.dim, h.count, h.dim, s.routing_iters});
    prev = h;
  }
  out.push_back({prev.count, prev.dim, s.class_caps.count, s.class_caps.dim, s.routing_iters});
  return out;
}

class ModelBundle {
 public:
  struct Forward {
    Var lengths;                   // [N, 2]
    Var class_capsules;            // [N, 2, dim]
    std::array<Var, 4> conv_maps;  // post-activation output of each conv layer; unset before the start layer
  };

  Stage stage = Stage::one;
  NetworkSpec spec;
  std::array<Conv2D, 4> conv;
  std::array<BatchNorm2D, 2> bn;
  MaxPool2D pool;
  std::vector<CapsuleLayer> capsules;
  Mode mode = Mode::infer;

  // Registry of trainable parameters, in a fixed order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (std::size_t i = 0; i < 4; ++i) {
      out.push_back(&conv[i].weight);
      out.push_back(&conv[i].bias);
      if (i < 2) {
        out.push_back(&bn[i].gamma);
        out.push_back(&bn[i].beta);
      }
    }
    for (auto& c : capsules) out.push_back(&c.weights);
    return out;
  }

  // Non-trainable state that a checkpoint must also carry.
  std::vector<std::pair<std::string, Tensor*>> buffers() {
    return {{"bn1.running_mean", &bn[0].running_mean},
            {"bn1.running_var", &bn[0].running_var},
            {"bn2.running_mean", &bn[1].running_mean},
            {"bn2.running_var", &bn[1].running_var}};
  }

  Forward forward(Graph& g, Var x) { return forward_from(g, 0, x); }

  // Runs the network starting after conv layer `start` (1..4) with `a` as
  // that layer's output, or from the raw input when start == 0.
  Forward forward_from(Graph& g, int start, Var a) {
    if (start < 0 || start > 4) throw Error("forward_from: start layer must be in 0..4");
    Forward f{};
    Var h = a;
    if (start == 0 && (h.shape().size() != 4 || h.shape()[1] != 1 || h.shape()[2] != spec.input_h ||
                       h.shape()[3] != spec.input_w))
      throw DimensionError("model expects [N,1," + std::to_string(spec.input_h) + "," + std::to_string(spec.input_w) +
                           "], got " + shape_str(h.shape()));
    if (start < 1) h = relu(batchnorm_forward(g, conv2d_forward(g, h, conv[0]), bn[0], mode));
    if (start <= 1) f.conv_maps[0] = h;
    if (start < 2) h = relu(batchnorm_forward(g, conv2d_forward(g, h, conv[1]), bn[1], mode));
    if (start <= 2) f.conv_maps[1] = h;
    if (start < 3) h = relu(conv2d_forward(g, h, conv[2]));
    if (start <= 3) f.conv_maps[2] = h;
    if (start < 4) h = conv2d_forward(g, maxpool_forward(h, pool), conv[3]);
    f.conv_maps[3] = h;
    h = maxpool_forward(h, pool);
    Var u = squash(to_primary_capsules(h, spec.primary_caps.dim));
    for (auto& layer : capsules) u = capsule_forward(g, u, layer);
    f.class_capsules = u;
    f.lengths = capsule_lengths(u);
    return f;
  }

  // Class-capsule lengths [N,2] for a batch [N,1,H,W] without recording.
  // Requires infer mode; in that mode a forward pass reads but never writes
  // the model, so concurrent calls on one instance are safe.
  Tensor predict(const Tensor& batch) const {
    if (mode != Mode::infer) throw Error("predict() requires an infer-mode model");
    Graph g(false);
    auto& self = const_cast<ModelBundle&>(*this);
    return self.forward(g, g.constant(batch)).lengths.value();
  }
};

inline ModelBundle build_model(Stage stage, const NetworkSpec& spec) {
  spec.validate();
  if (stage == Stage::two && !spec.hidden_caps.empty())
    throw ConfigError("stage two has a single routed capsule layer; hidden_caps must be empty");
  if (stage == Stage::one && spec.hidden_caps.size() != 2)
    throw ConfigError("stage one has three routed capsule layers; hidden_caps must have 2 entries");
  Rng rng(spec.seed);
  ModelBundle m;
  m.stage = stage;
  m.spec = spec;
  std::size_t in = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    m.conv[i] = Conv2D::make("conv" + std::to_string(i + 1), in, spec.conv_channels[i], spec.kernel, rng);
    in = spec.conv_channels[i];
  }
  for (std::size_t i = 0; i < 2; ++i)
    m.bn[i] = BatchNorm2D::make("bn" + std::to_string(i + 1), spec.conv_channels[i], spec.bn_momentum, spec.bn_epsilon);
  const auto layer_specs = capsule_layer_specs(spec);
  for (std::size_t i = 0; i < layer_specs.size(); ++i) {
    const bool last = i + 1 == layer_specs.size();
    m.capsules.push_back(CapsuleLayer::make(last ? std::string("class_caps") : "caps" + std::to_string(i + 1),
                                            layer_specs[i], rng));
  }
  return m;
}

// conv x4 -> BN on the first two -> primary capsules -> two hidden capsule
// layers -> class capsules (infected, not infected).
inline ModelBundle build_stage1(const NetworkSpec& spec) { return build_model(Stage::one, spec); }

// conv x4 -> primary capsules -> class capsules (COVID, non-COVID).
inline ModelBundle build_stage2(const NetworkSpec& spec) { return build_model(Stage::two, spec); }

inline std::size_t count_parameters(std::span<Parameter* const> params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

inline std::size_t count_parameters(ModelBundle& m) { return count_parameters(m.parameters()); }

// Same count computed from the spec alone, without allocating the model.
inline std::size_t count_parameters(const NetworkSpec& s) {
  std::size_t n = 0, in = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    n += s.conv_channels[i] * in * s.kernel.h * s.kernel.w + s.conv_channels[i];
    in = s.conv_channels[i];
  }
  n += 2 * (s.conv_channels[0] + s.conv_channels[1]);
  for (const auto& c : capsule_layer_specs(s)) n += shape_size(c.weight_shape());
  return n;
}

// Checkpoint container, all integers little-endian:
//   8 bytes  magic "CVFCKPT\0"
//   u32      format version (1)
//   u64      header length, then a UTF-8 JSON header {"stage", "spec"}
//   u32      tensor count, then per tensor:
//            u32 name length, name bytes, u32 rank, u64 dims[rank],
//            f64 values (IEEE-754 binary64, little-endian), row-major
namespace checkpoint {

inline constexpr char kMagic[8] = {'C', 'V', 'F', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kFormatVersion = 1;

namespace detail {
template <class T>
void put(std::ostream& os, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U u = std::bit_cast<U>(v);
  char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  os.write(b, sizeof(U));
}
template <class T>
T get(std::istream& is) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw DataError("checkpoint: unexpected end of file");
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(b[i]) << (8 * i);
  return std::bit_cast<T>(u);
}
}  // namespace detail

inline void save(ModelBundle& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  detail::put<std::uint32_t>(os, kFormatVersion);
  const std::string header = nlohmann::json{{"stage", to_string(m.stage)}, {"spec", m.spec}}.dump();
  detail::put<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<std::pair<std::string, const Tensor*>> entries;
  for (Parameter* p : m.parameters()) entries.emplace_back(p->name, &p->value);
  for (auto& [name, t] : m.buffers()) entries.emplace_back(name, t);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) detail::put<std::uint64_t>(os, d);
    for (double v : t->data()) detail::put<double>(os, v);
  }
  if (!os) throw DataError("failed writing checkpoint: " + path);
}

inline ModelBundle load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw DataError("not a checkpoint file: " + path);
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kFormatVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get<std::uint64_t>(is);
  std::string header(hlen, '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(hlen))) throw DataError("checkpoint: truncated header");
  NetworkSpec spec;
  std::string stage;
  try {
    const auto hj = nlohmann::json::parse(header);
    from_json(hj.at("spec"), spec);
    stage = hj.at("stage").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: malformed header: " + std::string(e.what()));
  }
  ModelBundle m = build_model(parse_stage(stage), spec);

  std::map<std::string, Tensor*> slots;
  for (Parameter* p : m.parameters()) slots[p->name] = &p->value;
  for (auto& [name, t] : m.buffers()) slots[name] = t;
  const auto count = detail::get<std::uint32_t>(is);
  if (count != slots.size())
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model needs " + std::to_string(slots.size()));
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(detail::get<std::uint32_t>(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw DataError("checkpoint: truncated name");
    const auto it = slots.find(name);
    if (it == slots.end()) throw DataError("checkpoint: unknown tensor '" + name + "'");
    const auto rank = detail::get<std::uint32_t>(is);
    if (rank != it->second->rank()) throw DataError("checkpoint: tensor '" + name + "' has the wrong rank");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint64_t>(is);
    if (shape != it->second->shape())
      throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                      shape_str(it->second->shape()));
    for (auto& v : it->second->data()) v = detail::get<double>(is);
  }
  for (Parameter* p : m.parameters()) p->grad = Tensor::zeros_like(p->value);
  m.mode = Mode::infer;
  return m;
}

}  // namespace checkpoint

}  // namespace covidfact
