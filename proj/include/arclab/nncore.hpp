#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arclab/core.hpp"

namespace arclab {

enum class Activation { linear, tanh, relu };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "linear") return Activation::linear;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Layer sizes include input and output; hidden layers share one activation
/// and the output layer is linear.
struct MlpSpec {
  std::vector<std::size_t> layer_sizes;
  Activation hidden = Activation::tanh;
};

/// Fully connected network with parameters in one flat buffer so the
/// optimizer and serializer can treat them as a single vector. Layout per
/// layer: weights (out x in, row-major) followed by biases (out).
class Mlp {
public:
  /// Per-layer activations recorded by a forward pass, consumed by backward.
  struct Trace {
    std::vector<Vec> outputs;  // outputs[0] is the input
  };

  Mlp() = default;

  Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
    if (spec_.layer_sizes.size() < 2) throw ConfigError("Mlp needs at least two layer sizes");
    for (auto n : spec_.layer_sizes)
      if (n == 0) throw ConfigError("Mlp layer sizes must be positive");
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < spec_.layer_sizes.size(); ++l) {
      offsets_.push_back(total);
      total += spec_.layer_sizes[l + 1] * (spec_.layer_sizes[l] + 1);
    }
    params_.assign(total, 0.0);
    grads_.assign(total, 0.0);
    // Uniform fan-in init with unit-variance-preserving scale; biases zero.
    for (std::size_t l = 0; l < num_layers(); ++l) {
      const std::size_t in = spec_.layer_sizes[l];
      const std::size_t out = spec_.layer_sizes[l + 1];
      const double bound = std::sqrt(3.0 / static_cast<double>(in));
      double* w = params_.data() + offsets_[l];
      for (std::size_t i = 0; i < out * in; ++i) w[i] = rng.uniform(-bound, bound);
    }
  }

  Mlp(MlpSpec spec, std::uint64_t seed) {
    Rng rng(seed);
    *this = Mlp(std::move(spec), rng);
  }

  const MlpSpec& spec() const noexcept { return spec_; }
  std::size_t num_layers() const noexcept { return spec_.layer_sizes.size() - 1; }
  std::size_t input_size() const { return spec_.layer_sizes.front(); }
  std::size_t output_size() const { return spec_.layer_sizes.back(); }
  std::size_t param_count() const noexcept { return params_.size(); }

  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }
  std::span<double> grads() noexcept { return grads_; }
  std::span<const double> grads() const noexcept { return grads_; }
  void zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

  std::span<double> weights(std::size_t layer) {
    return {params_.data() + offsets_[layer],
            spec_.layer_sizes[layer + 1] * spec_.layer_sizes[layer]};
  }
  std::span<double> biases(std::size_t layer) {
    const std::size_t out = spec_.layer_sizes[layer + 1];
    return {params_.data() + offsets_[layer] + out * spec_.layer_sizes[layer], out};
  }

  Vec forward(std::span<const double> x) const {
    Trace t;
    return forward(x, t);
  }

  Vec forward(std::span<const double> x, Trace& trace) const {
    if (x.size() != input_size())
      throw Error("Mlp::forward: input has " + std::to_string(x.size()) + " entries, expected " +
                  std::to_string(input_size()));
    trace.outputs.clear();
    trace.outputs.emplace_back(x.begin(), x.end());
    for (std::size_t l = 0; l < num_layers(); ++l) {
      const std::size_t in = spec_.layer_sizes[l];
      const std::size_t out = spec_.layer_sizes[l + 1];
      const double* w = params_.data() + offsets_[l];
      const double* b = w + out * in;
      const Vec& prev = trace.outputs.back();
      Vec y(out);
      const bool last = l + 1 == num_layers();
      for (std::size_t o = 0; o < out; ++o) {
        double acc = b[o];
        const double* wr = w + o * in;
        for (std::size_t i = 0; i < in; ++i) acc += wr[i] * prev[i];
        y[o] = last ? acc : activate(acc);
      }
      trace.outputs.push_back(std::move(y));
    }
    return trace.outputs.back();
  }

  /// Accumulates parameter gradients of <upstream, output> into grads() and
  /// returns the gradient with respect to the input.
  Vec backward(const Trace& trace, std::span<const double> upstream) {
    if (trace.outputs.size() != num_layers() + 1)
      throw Error("Mlp::backward: no cached forward pass for this network");
    if (upstream.size() != output_size()) throw Error("Mlp::backward: upstream size mismatch");
    Vec delta(upstream.begin(), upstream.end());
    for (std::size_t l = num_layers(); l-- > 0;) {
      const std::size_t in = spec_.layer_sizes[l];
      const std::size_t out = spec_.layer_sizes[l + 1];
      if (l + 1 != num_layers()) {
        const Vec& y = trace.outputs[l + 1];
        for (std::size_t o = 0; o < out; ++o) delta[o] *= activation_derivative(y[o]);
      }
      const Vec& x = trace.outputs[l];
      const double* w = params_.data() + offsets_[l];
      double* gw = grads_.data() + offsets_[l];
      double* gb = gw + out * in;
      Vec dx(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta[o];
        gb[o] += d;
        if (d == 0.0) continue;
        double* gwr = gw + o * in;
        const double* wr = w + o * in;
        for (std::size_t i = 0; i < in; ++i) {
          gwr[i] += d * x[i];
          dx[i] += d * wr[i];
        }
      }
      delta = std::move(dx);
    }
    return delta;
  }

  bool all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
  }

  // Serialization --------------------------------------------------------------

  nlohmann::json manifest(std::uint64_t seed = 0) const {
    return {{"format", "arclab.mlp"},
            {"version", 1},
            {"layer_sizes", spec_.layer_sizes},
            {"activation", to_string(spec_.hidden)},
            {"seed", seed},
            {"param_count", params_.size()}};
  }

  /// Parameters as little-endian IEEE-754 doubles.
  std::string param_blob() const {
    std::string out(params_.size() * 8, '\0');
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(params_[i]);
      for (int b = 0; b < 8; ++b)
        out[i * 8 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xffU);
    }
    return out;
  }

  static Mlp from_manifest(const nlohmann::json& m, std::string_view blob) {
    if (m.value("format", "") != "arclab.mlp" || m.value("version", 0) != 1)
      throw Error("unrecognized network manifest");
    Rng rng(0);
    Mlp net(MlpSpec{m.at("layer_sizes").get<std::vector<std::size_t>>(),
                    activation_from_string(m.at("activation").get<std::string>())},
            rng);
    if (blob.size() != net.params_.size() * 8) throw Error("parameter blob size mismatch");
    for (std::size_t i = 0; i < net.params_.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[i * 8 + static_cast<std::size_t>(b)]))
                << (8 * b);
      net.params_[i] = std::bit_cast<double>(bits);
    }
    return net;
  }

  void save(const std::string& path_prefix, std::uint64_t seed = 0) const {
    write_text_file(path_prefix + ".json", manifest(seed).dump(2) + "\n");
    write_text_file(path_prefix + ".bin", param_blob());
  }

  static Mlp load(const std::string& path_prefix) {
    return from_manifest(nlohmann::json::parse(read_text_file(path_prefix + ".json")),
                         read_text_file(path_prefix + ".bin"));
  }

private:
  double activate(double z) const {
    switch (spec_.hidden) {
      case Activation::tanh: return std::tanh(z);
      case Activation::relu: return z > 0.0 ? z : 0.0;
      case Activation::linear: return z;
    }
    return z;
  }

  // Derivative expressed through the activation output y.
  double activation_derivative(double y) const {
    switch (spec_.hidden) {
      case Activation::tanh: return 1.0 - y * y;
      case Activation::relu: return y > 0.0 ? 1.0 : 0.0;
      case Activation::linear: return 1.0;
    }
    return 1.0;
  }

  MlpSpec spec_;
  std::vector<std::size_t> offsets_;
  Vec params_;
  Vec grads_;
};

// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
public:
  Adam() = default;
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return t_; }
  std::span<const double> first_moment() const noexcept { return m_; }
  std::span<const double> second_moment() const noexcept { return v_; }

  /// Descent step on `params` with bias-corrected moments.
  void step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw Error("Adam::step: shape mismatch");
    for (double g : grads)
      if (!std::isfinite(g)) throw NumericError("Adam::step: non-finite gradient; aborting training");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      params[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }

  void step(Mlp& net) { step(net.params(), net.grads()); }

private:
  AdamConfig cfg_;
  Vec m_;
  Vec v_;
  std::uint64_t t_ = 0;
};

/// Parameters and gradients of several networks viewed as one vector, for
/// joint optimization and finite-difference checks.
class ParamGroup {
public:
  explicit ParamGroup(std::vector<Mlp*> nets) : nets_(std::move(nets)) {}

  std::size_t size() const {
    std::size_t n = 0;
    for (auto* net : nets_) n += net->param_count();
    return n;
  }
  void zero_grad() {
    for (auto* net : nets_) net->zero_grad();
  }
  double& param(std::size_t i) { return locate(i, false); }
  double grad(std::size_t i) { return locate(i, true); }

  Vec gather_grads() const {
    Vec g;
    for (auto* net : nets_) g.insert(g.end(), net->grads().begin(), net->grads().end());
    return g;
  }

  void scale_grads(double s) {
    for (auto* net : nets_)
      for (double& g : net->grads()) g *= s;
  }

  const std::vector<Mlp*>& nets() const noexcept { return nets_; }

private:
  double& locate(std::size_t i, bool grad) {
    for (auto* net : nets_) {
      if (i < net->param_count()) return grad ? net->grads()[i] : net->params()[i];
      i -= net->param_count();
    }
    throw Error("ParamGroup: index out of range");
  }

  std::vector<Mlp*> nets_;
};

/// One Adam per network, stepped together.
class GroupOptimizer {
public:
  GroupOptimizer(const std::vector<Mlp*>& nets, AdamConfig cfg) : nets_(nets) {
    for (auto* n : nets_) opts_.emplace_back(n->param_count(), cfg);
  }
  void step() {
    for (std::size_t i = 0; i < nets_.size(); ++i) opts_[i].step(*nets_[i]);
  }

private:
  std::vector<Mlp*> nets_;
  std::vector<Adam> opts_;
};

}  // namespace arclab
