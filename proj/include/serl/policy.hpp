#pragma once

// Autoregressive linear-softmax token policy over hashed n-gram features.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "serl/core.hpp"
#include "serl/rng.hpp"

namespace serl {

inline constexpr std::size_t kFeatureWindow = 8;
inline constexpr std::size_t kMaxThinkTokens = 4;
inline constexpr std::size_t kMaxCommandTokens = 12;

class PolicyParams {
 public:
  PolicyParams() = default;
  PolicyParams(std::size_t vocab_size, std::size_t feature_dim)
      : V_(vocab_size), D_(feature_dim), W_(vocab_size * feature_dim, 0.0), b_(vocab_size, 0.0) {
    if (feature_dim < 2) throw std::invalid_argument("feature dimension must be >= 2");
  }

  std::size_t vocab_size() const { return V_; }
  std::size_t feature_dim() const { return D_; }

  double& w(std::size_t v, std::size_t j) { return W_[v * D_ + j]; }
  double w(std::size_t v, std::size_t j) const { return W_[v * D_ + j]; }
  std::vector<double>& weights() { return W_; }
  const std::vector<double>& weights() const { return W_; }
  std::vector<double>& bias() { return b_; }
  const std::vector<double>& bias() const { return b_; }

  bool all_finite() const {
    auto fin = [](double x) { return std::isfinite(x); };
    return std::all_of(W_.begin(), W_.end(), fin) && std::all_of(b_.begin(), b_.end(), fin);
  }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

 private:
  std::size_t V_ = 0;
  std::size_t D_ = 0;
  std::vector<double> W_;
  std::vector<double> b_;
};

// Frozen copy of the student used for hindsight scoring.
class TeacherSnapshot {
 public:
  TeacherSnapshot(PolicyParams params, long step) : params_(std::move(params)), step_(step) {}
  const PolicyParams& params() const { return params_; }
  long step() const { return step_; }

 private:
  PolicyParams params_;
  long step_;
};

inline TeacherSnapshot snapshot(const PolicyParams& params, long step = 0) { return TeacherSnapshot(params, step); }

// Active feature indices (each with value 1.0), sorted and unique.
struct FeatureVector {
  std::vector<std::uint32_t> indices;
  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

class Fnv1a64 {
 public:
  void feed(std::string_view bytes) {
    for (unsigned char c : bytes) {
      h_ ^= c;
      h_ *= 1099511628211ULL;
    }
  }
  void feed(std::uint64_t number) {
    char buf[24];
    auto res = std::to_chars(buf, buf + sizeof buf, number);
    feed(std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)));
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 14695981039346656037ULL;
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  Fnv1a64 h;
  h.feed(bytes);
  return h.value();
}

// Hashes of "n|id_1,...,id_n" for n in {1,2,3} over the last 8 tokens, mod
// (D-1), plus the bias feature D-1.
inline FeatureVector featurize(std::span<const TokenId> context, std::size_t feature_dim) {
  const std::size_t buckets = feature_dim - 1;
  const std::size_t len = std::min(context.size(), kFeatureWindow);
  auto window = context.subspan(context.size() - len);
  FeatureVector f;
  f.indices.reserve(3 * len + 1);
  for (std::size_t n = 1; n <= 3; ++n) {
    for (std::size_t s = 0; s + n <= len; ++s) {
      Fnv1a64 h;
      h.feed(static_cast<std::uint64_t>(n));
      h.feed("|");
      for (std::size_t k = 0; k < n; ++k) {
        if (k) h.feed(",");
        h.feed(static_cast<std::uint64_t>(window[s + k]));
      }
      f.indices.push_back(static_cast<std::uint32_t>(h.value() % buckets));
    }
  }
  f.indices.push_back(static_cast<std::uint32_t>(buckets));
  std::sort(f.indices.begin(), f.indices.end());
  f.indices.erase(std::unique(f.indices.begin(), f.indices.end()), f.indices.end());
  return f;
}

inline std::vector<double> logits(const PolicyParams& params, const FeatureVector& f) {
  const std::size_t V = params.vocab_size();
  std::vector<double> z(params.bias());
  for (std::size_t v = 0; v < V; ++v) {
    for (auto j : f.indices) z[v] += params.w(v, j);
  }
  return z;
}

inline std::vector<double> log_softmax(std::span<const double> z, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  std::vector<double> out(z.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = z[i] / temperature;
    m = std::max(m, out[i]);
  }
  double sum = 0.0;
  for (double x : out) sum += std::exp(x - m);
  const double lse = m + std::log(sum);
  for (double& x : out) x -= lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> z, double temperature = 1.0) {
  auto out = log_softmax(z, temperature);
  for (double& x : out) x = std::exp(x);
  return out;
}

inline double log_prob(const PolicyParams& params, std::span<const TokenId> context, TokenId token, double temperature = 1.0) {
  auto z = logits(params, featurize(context, params.feature_dim()));
  return log_softmax(z, temperature).at(token);
}

// Inverse-CDF draw accumulated in id order.
inline TokenId sample_from(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double cum = 0.0;
  TokenId last_positive = 0;
  for (std::size_t v = 0; v < probs.size(); ++v) {
    if (probs[v] > 0.0) last_positive = static_cast<TokenId>(v);
    cum += probs[v];
    if (u < cum) return static_cast<TokenId>(v);
  }
  return last_positive;
}

inline TokenId argmax_token(std::span<const double> z) {
  return static_cast<TokenId>(std::max_element(z.begin(), z.end()) - z.begin());
}

inline TokenId sample_token(const PolicyParams& params, std::span<const TokenId> context, double temperature, Rng& rng) {
  auto z = logits(params, featurize(context, params.feature_dim()));
  return sample_from(softmax(z, temperature), rng);
}

// Gradient of log p(token) at temperature 1: d/dz = onehot - p, d/dW[:,j] = d/dz * f_j.
struct TokenGrad {
  FeatureVector features;
  std::vector<double> dlogits;
};

inline TokenGrad log_prob_grad(const PolicyParams& params, std::span<const TokenId> context, TokenId token) {
  TokenGrad g;
  g.features = featurize(context, params.feature_dim());
  g.dlogits = softmax(logits(params, g.features));
  for (double& p : g.dlogits) p = -p;
  g.dlogits.at(token) += 1.0;
  return g;
}

// Dense gradient over (W, b).
struct ParamGrad {
  std::size_t V = 0, D = 0;
  std::vector<double> W;
  std::vector<double> b;

  ParamGrad() = default;
  explicit ParamGrad(const PolicyParams& like)
      : V(like.vocab_size()), D(like.feature_dim()), W(V * D, 0.0), b(V, 0.0) {}

  void add(const FeatureVector& f, std::span<const double> dlogits, double scale) {
    for (std::size_t v = 0; v < V; ++v) {
      const double g = scale * dlogits[v];
      b[v] += g;
      double* row = W.data() + v * D;
      for (auto j : f.indices) row[j] += g;
    }
  }

  double norm() const {
    double s = 0.0;
    for (double x : W) s += x * x;
    for (double x : b) s += x * x;
    return std::sqrt(s);
  }

  // params <- params - lr * grad
  void descend(PolicyParams& params, double lr) const {
    auto& pw = params.weights();
    auto& pb = params.bias();
    for (std::size_t i = 0; i < W.size(); ++i) pw[i] -= lr * W[i];
    for (std::size_t i = 0; i < b.size(); ++i) pb[i] -= lr * b[i];
  }
};

enum class Decoding { Sample, Greedy };

struct GeneratedAction {
  TokenList tokens;
  std::vector<double> logprobs;
  std::vector<bool> mask;
};

// Emits up to 4 think tokens, ACT_BEGIN, then command tokens until ACT_END or
// the 12-token cap. Forced markers are recorded at the model's own
// log-probability. Stored log-probs are always at temperature 1.
inline GeneratedAction generate_action(const PolicyParams& params, std::span<const TokenId> history,
                                       const TrainConfig& config, Rng& rng, Decoding decoding = Decoding::Sample) {
  GeneratedAction out;
  const auto cap = static_cast<std::size_t>(config.context_cap);
  auto choose = [&](std::optional<TokenId> forced) {
    auto ctx = recent_context(history, out.tokens, cap);
    auto z = logits(params, featurize(ctx, params.feature_dim()));
    TokenId y;
    if (forced) {
      y = *forced;
    } else if (decoding == Decoding::Greedy) {
      y = argmax_token(z);
    } else {
      y = sample_from(softmax(z, config.rollout_temperature), rng);
    }
    out.tokens.push_back(y);
    out.logprobs.push_back(log_softmax(z, 1.0)[y]);
    return y;
  };

  std::size_t think = 0;
  while (true) {
    if (think == kMaxThinkTokens) {
      choose(tok(Marker::ActBegin));
      break;
    }
    if (choose(std::nullopt) == tok(Marker::ActBegin)) break;
    ++think;
  }
  std::size_t command = 0;
  while (true) {
    if (command == kMaxCommandTokens) {
      choose(tok(Marker::ActEnd));
      break;
    }
    if (choose(std::nullopt) == tok(Marker::ActEnd)) break;
    ++command;
  }
  out.mask = action_mask_for(out.tokens);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: header line, bias line, V rows of W, then the vocabulary dump.

struct Checkpoint {
  PolicyParams params;
  long step = 0;
  Vocabulary vocab;
};

inline void write_doubles(std::ostream& os, const double* data, std::size_t n) {
  char buf[40];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", data[i]);
    if (i) os << ' ';
    os << buf;
  }
  os << '\n';
}

inline void write_checkpoint(std::ostream& os, const PolicyParams& params, long step, const Vocabulary& vocab) {
  if (vocab.size() != params.vocab_size()) throw std::invalid_argument("checkpoint: vocabulary size mismatch");
  os << "SERLCKPT v1 V=" << params.vocab_size() << " D=" << params.feature_dim() << " step=" << step << '\n';
  write_doubles(os, params.bias().data(), params.vocab_size());
  for (std::size_t v = 0; v < params.vocab_size(); ++v) {
    write_doubles(os, params.weights().data() + v * params.feature_dim(), params.feature_dim());
  }
  os << vocab.dump();
}

namespace detail {

inline std::vector<double> parse_doubles(const std::string& line, std::size_t expected, const char* what) {
  std::vector<double> out;
  out.reserve(expected);
  const char* p = line.c_str();
  while (*p) {
    while (*p == ' ' || *p == '\t') ++p;
    if (!*p) break;
    char* end = nullptr;
    double x = std::strtod(p, &end);
    if (end == p) throw std::runtime_error(std::string("checkpoint: malformed number in ") + what);
    if (!std::isfinite(x)) throw std::runtime_error(std::string("checkpoint: non-finite value in ") + what);
    out.push_back(x);
    p = end;
  }
  if (out.size() != expected) throw std::runtime_error(std::string("checkpoint: wrong value count in ") + what);
  return out;
}

}  // namespace detail

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("checkpoint: empty file");
  unsigned long long V = 0, D = 0;
  long step = 0;
  if (std::sscanf(header.c_str(), "SERLCKPT v1 V=%llu D=%llu step=%ld", &V, &D, &step) != 3 || V == 0 || D < 2) {
    throw std::runtime_error("checkpoint: malformed header");
  }
  Checkpoint ck;
  ck.step = step;
  ck.params = PolicyParams(V, D);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("checkpoint: missing bias line");
  ck.params.bias() = detail::parse_doubles(line, V, "bias");
  for (std::size_t v = 0; v < V; ++v) {
    if (!std::getline(is, line)) throw std::runtime_error("checkpoint: missing weight row");
    auto row = detail::parse_doubles(line, D, "weights");
    std::copy(row.begin(), row.end(), ck.params.weights().begin() + static_cast<std::ptrdiff_t>(v * D));
  }
  std::ostringstream rest;
  rest << is.rdbuf();
  ck.vocab = Vocabulary::parse(rest.str());
  if (ck.vocab.size() != V) throw std::runtime_error("checkpoint: vocabulary size does not match header");
  return ck;
}

}  // namespace serl
