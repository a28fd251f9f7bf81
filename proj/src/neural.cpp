#include "xmc/neural.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "binio.hpp"
#include "xmc/error.hpp"

namespace xmc {

namespace {

// out = W x + b with W stored row-major (out.size() rows, x.size() cols)
void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x,
            std::span<double> out) {
  const std::size_t rows = out.size();
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = b.empty() ? 0.0 : b[r];
    const double* wr = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    out[r] = acc;
  }
}

void tanh_inplace(std::span<double> v) {
  for (auto& x : v) x = std::tanh(x);
}

// dW += dy (x)^T, db += dy, dx += W^T dy; dy is the gradient at the affine
// output. dx may be empty when the input needs no gradient.
void affine_backward(std::span<const double> w, std::span<const double> x,
                     std::span<const double> dy, std::span<double> dw, std::span<double> db,
                     std::span<double> dx) {
  const std::size_t rows = dy.size();
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = dy[r];
    if (!db.empty()) db[r] += g;
    double* dwr = dw.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) dwr[c] += g * x[c];
  }
  if (!dx.empty()) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double g = dy[r];
      const double* wr = w.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dx[c] += wr[c] * g;
    }
  }
}

// gradient through y = tanh(pre): d_pre = dy * (1 - y^2)
std::vector<double> tanh_backward(std::span<const double> y, std::span<const double> dy) {
  std::vector<double> d(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) d[i] = dy[i] * (1.0 - y[i] * y[i]);
  return d;
}

std::vector<double> concat(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

struct AttendCache {
  std::vector<std::vector<double>> concats;  // [anchor;state] per comment
  std::vector<std::vector<double>> hiddens;  // tanh hidden of sigma per comment
  std::vector<double> z;
  std::vector<double> betas;
  std::vector<double> attended;
};

AttendCache attend_forward(std::span<const double> anchor,
                           const std::vector<std::vector<double>>& states,
                           std::span<const double> w1, std::span<const double> b1,
                           std::span<const double> w2, double b2) {
  if (states.empty()) throw ArgumentError("attention: need at least one comment state");
  const std::size_t a_dim = b1.size();
  const std::size_t in_dim = anchor.size() + states[0].size();
  if (w1.size() != a_dim * in_dim || w2.size() != a_dim) {
    throw StateError("attention: scorer parameter shapes do not match the inputs");
  }

  AttendCache cache;
  const std::size_t n = states.size();
  cache.concats.reserve(n);
  cache.hiddens.reserve(n);
  cache.z.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (states[i].size() != states[0].size()) {
      throw StateError("attention: ragged comment states");
    }
    cache.concats.push_back(concat(anchor, states[i]));
    std::vector<double> hidden(a_dim);
    affine(w1, b1, cache.concats.back(), hidden);
    tanh_inplace(hidden);
    double z = b2;
    for (std::size_t j = 0; j < a_dim; ++j) z += w2[j] * hidden[j];
    cache.z[i] = z;
    cache.hiddens.push_back(std::move(hidden));
  }

  cache.betas = softmax(cache.z);
  cache.attended.assign(states[0].size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t x = 0; x < cache.attended.size(); ++x) {
      cache.attended[x] += cache.betas[i] * states[i][x];
    }
  }
  return cache;
}

// Backward through attend_forward. d_attended is the gradient at u. Adds into
// d_anchor, d_states, and the sigma parameter gradients.
void attend_backward(const AttendCache& cache, const std::vector<std::vector<double>>& states,
                     std::span<const double> d_attended, std::span<const double> w1,
                     std::span<const double> w2, std::span<double> d_anchor,
                     std::vector<std::vector<double>>& d_states, std::span<double> dw1,
                     std::span<double> db1, std::span<double> dw2, double& db2) {
  const std::size_t n = states.size();
  const std::size_t h = d_attended.size();
  const std::size_t a_dim = cache.hiddens[0].size();

  // u = sum betas_i state_i
  std::vector<double> d_betas(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t x = 0; x < h; ++x) {
      acc += d_attended[x] * states[i][x];
      d_states[i][x] += cache.betas[i] * d_attended[x];
    }
    d_betas[i] = acc;
  }

  // softmax jacobian: dz_i = b_i (dbeta_i - sum_k b_k dbeta_k)
  double mix = 0.0;
  for (std::size_t i = 0; i < n; ++i) mix += cache.betas[i] * d_betas[i];
  std::vector<double> dz(n);
  for (std::size_t i = 0; i < n; ++i) dz[i] = cache.betas[i] * (d_betas[i] - mix);

  std::vector<double> d_concat(cache.concats[0].size());
  for (std::size_t i = 0; i < n; ++i) {
    db2 += dz[i];
    std::vector<double> d_hidden(a_dim);
    for (std::size_t j = 0; j < a_dim; ++j) {
      dw2[j] += dz[i] * cache.hiddens[i][j];
      d_hidden[j] = dz[i] * w2[j];
    }
    const auto d_pre = tanh_backward(cache.hiddens[i], d_hidden);
    std::fill(d_concat.begin(), d_concat.end(), 0.0);
    affine_backward(w1, cache.concats[i], d_pre, dw1, db1, d_concat);
    const std::size_t anchor_dim = d_anchor.size();
    for (std::size_t x = 0; x < anchor_dim; ++x) d_anchor[x] += d_concat[x];
    for (std::size_t x = 0; x < h; ++x) d_states[i][x] += d_concat[anchor_dim + x];
  }
}

// Everything the backward pass needs from one forward evaluation
struct ForwardCache {
  std::vector<double> x;   // [img;txt]
  std::vector<double> h1;  // base hidden
  std::vector<double> hf;  // base output
  std::vector<double> proj;                          // early: p; unused late
  std::vector<double> hv;                            // late anchors
  std::vector<double> ht;
  std::vector<std::vector<double>> state_inputs;     // comment-proj inputs
  std::vector<std::vector<double>> states;           // h^c_n
  AttendCache attend_img;                            // anchored on hf (early) / hv (late)
  AttendCache attend_txt;                            // late only
  std::vector<double> head_in;
  std::vector<double> logits;
};

struct ParamView {
  std::span<const double> base_w1, base_b1, base_w2, base_b2;
  std::span<const double> proj_w, proj_b;      // early image projection
  std::span<const double> vproj_w, vproj_b;    // late anchors
  std::span<const double> tproj_w, tproj_b;
  std::span<const double> comment_w, comment_b;
  std::span<const double> attn_w1, attn_b1, attn_w2, attn_b2;
  std::span<const double> head_w, head_b;
};

ParamView view_params(const FusionClassifier& model) {
  ParamView v;
  v.base_w1 = model.block("base.w1");
  v.base_b1 = model.block("base.b1");
  v.base_w2 = model.block("base.w2");
  v.base_b2 = model.block("base.b2");
  if (model.config().scheme == FusionScheme::early) {
    v.proj_w = model.block("img_proj.w");
    v.proj_b = model.block("img_proj.b");
  } else {
    v.vproj_w = model.block("v_proj.w");
    v.vproj_b = model.block("v_proj.b");
    v.tproj_w = model.block("t_proj.w");
    v.tproj_b = model.block("t_proj.b");
  }
  v.comment_w = model.block("comment.w");
  v.comment_b = model.block("comment.b");
  v.attn_w1 = model.block("attn.w1");
  v.attn_b1 = model.block("attn.b1");
  v.attn_w2 = model.block("attn.w2");
  v.attn_b2 = model.block("attn.b2");
  v.head_w = model.block("head.w");
  v.head_b = model.block("head.b");
  return v;
}

struct GradView {
  std::span<double> base_w1, base_b1, base_w2, base_b2;
  std::span<double> proj_w, proj_b;
  std::span<double> vproj_w, vproj_b;
  std::span<double> tproj_w, tproj_b;
  std::span<double> comment_w, comment_b;
  std::span<double> attn_w1, attn_b1, attn_w2, attn_b2;
  std::span<double> head_w, head_b;
};

GradView view_grads(const FusionClassifier& model, std::vector<double>& grad) {
  const auto span_of = [&](std::string_view name) {
    for (const auto& b : model.blocks()) {
      if (b.name == name) return std::span<double>(grad.data() + b.offset, b.size());
    }
    throw StateError("unknown parameter block: " + std::string(name));
  };
  GradView g;
  g.base_w1 = span_of("base.w1");
  g.base_b1 = span_of("base.b1");
  g.base_w2 = span_of("base.w2");
  g.base_b2 = span_of("base.b2");
  if (model.config().scheme == FusionScheme::early) {
    g.proj_w = span_of("img_proj.w");
    g.proj_b = span_of("img_proj.b");
  } else {
    g.vproj_w = span_of("v_proj.w");
    g.vproj_b = span_of("v_proj.b");
    g.tproj_w = span_of("t_proj.w");
    g.tproj_b = span_of("t_proj.b");
  }
  g.comment_w = span_of("comment.w");
  g.comment_b = span_of("comment.b");
  g.attn_w1 = span_of("attn.w1");
  g.attn_b1 = span_of("attn.b1");
  g.attn_w2 = span_of("attn.w2");
  g.attn_b2 = span_of("attn.b2");
  g.head_w = span_of("head.w");
  g.head_b = span_of("head.b");
  return g;
}

void check_input(const ClassifierConfig& config, const ModelInput& input) {
  if (input.comments.empty()) {
    throw ArgumentError("classifier: need at least one comment");
  }
  if (input.image.size() != static_cast<std::size_t>(config.dim_image) ||
      input.text.size() != static_cast<std::size_t>(config.dim_text)) {
    throw StateError("classifier: post embedding dimensions do not match the model");
  }
  for (const auto& c : input.comments) {
    if (c.size() != static_cast<std::size_t>(config.dim_text)) {
      throw StateError("classifier: comment embedding dimensions do not match the model");
    }
  }
}

ForwardCache run_forward(const FusionClassifier& model, const ModelInput& input) {
  const auto& config = model.config();
  check_input(config, input);
  const ParamView p = view_params(model);
  const auto h = static_cast<std::size_t>(config.hidden);

  ForwardCache cache;
  cache.x = concat(input.image, input.text);
  cache.h1.resize(h);
  affine(p.base_w1, p.base_b1, cache.x, cache.h1);
  tanh_inplace(cache.h1);
  cache.hf.resize(h);
  affine(p.base_w2, p.base_b2, cache.h1, cache.hf);
  tanh_inplace(cache.hf);

  const std::size_t n = input.comments.size();
  cache.state_inputs.reserve(n);
  cache.states.reserve(n);
  if (config.scheme == FusionScheme::early) {
    cache.proj.resize(config.dim_text);
    affine(p.proj_w, p.proj_b, input.image, cache.proj);
    for (const auto& c : input.comments) {
      cache.state_inputs.push_back(concat(cache.proj, c));
      std::vector<double> state(h);
      affine(p.comment_w, p.comment_b, cache.state_inputs.back(), state);
      tanh_inplace(state);
      cache.states.push_back(std::move(state));
    }
    cache.attend_img =
        attend_forward(cache.hf, cache.states, p.attn_w1, p.attn_b1, p.attn_w2, p.attn_b2[0]);
    cache.head_in = concat(cache.hf, cache.attend_img.attended);
  } else {
    cache.hv.resize(h);
    affine(p.vproj_w, p.vproj_b, input.image, cache.hv);
    cache.ht.resize(h);
    affine(p.tproj_w, p.tproj_b, input.text, cache.ht);
    for (const auto& c : input.comments) {
      cache.state_inputs.push_back(c);
      std::vector<double> state(h);
      affine(p.comment_w, p.comment_b, c, state);
      tanh_inplace(state);
      cache.states.push_back(std::move(state));
    }
    cache.attend_img =
        attend_forward(cache.hv, cache.states, p.attn_w1, p.attn_b1, p.attn_w2, p.attn_b2[0]);
    cache.attend_txt =
        attend_forward(cache.ht, cache.states, p.attn_w1, p.attn_b1, p.attn_w2, p.attn_b2[0]);
    cache.head_in = concat(concat(cache.attend_img.attended, cache.attend_txt.attended), cache.hf);
  }

  cache.logits.resize(config.classes);
  affine(p.head_w, p.head_b, cache.head_in, cache.logits);
  return cache;
}

void run_backward(const FusionClassifier& model, const ModelInput& input,
                  const ForwardCache& cache, std::span<const double> d_logits, GradView& g) {
  const auto& config = model.config();
  const ParamView p = view_params(model);
  const auto h = static_cast<std::size_t>(config.hidden);
  const std::size_t n = cache.states.size();

  std::vector<double> d_head_in(cache.head_in.size(), 0.0);
  affine_backward(p.head_w, cache.head_in, d_logits, g.head_w, g.head_b, d_head_in);

  std::vector<double> d_hf(h, 0.0);
  std::vector<std::vector<double>> d_states(n, std::vector<double>(h, 0.0));

  if (config.scheme == FusionScheme::early) {
    std::span<const double> d_u{d_head_in.data() + h, h};
    for (std::size_t x = 0; x < h; ++x) d_hf[x] += d_head_in[x];

    double d_attn_b2 = 0.0;
    attend_backward(cache.attend_img, cache.states, d_u, p.attn_w1, p.attn_w2, d_hf, d_states,
                    g.attn_w1, g.attn_b1, g.attn_w2, d_attn_b2);
    g.attn_b2[0] += d_attn_b2;

    std::vector<double> d_proj(config.dim_text, 0.0);
    std::vector<double> d_state_in(cache.state_inputs[0].size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto d_pre = tanh_backward(cache.states[i], d_states[i]);
      std::fill(d_state_in.begin(), d_state_in.end(), 0.0);
      affine_backward(p.comment_w, cache.state_inputs[i], d_pre, g.comment_w, g.comment_b,
                      d_state_in);
      for (int x = 0; x < config.dim_text; ++x) d_proj[x] += d_state_in[x];
      // comment vectors are inputs, their slice of d_state_in is dropped
    }
    affine_backward(p.proj_w, input.image, d_proj, g.proj_w, g.proj_b, {});
  } else {
    std::span<const double> d_v{d_head_in.data(), h};
    std::span<const double> d_t{d_head_in.data() + h, h};
    for (std::size_t x = 0; x < h; ++x) d_hf[x] += d_head_in[2 * h + x];

    std::vector<double> d_hv(h, 0.0);
    std::vector<double> d_ht(h, 0.0);
    double d_attn_b2 = 0.0;
    attend_backward(cache.attend_img, cache.states, d_v, p.attn_w1, p.attn_w2, d_hv, d_states,
                    g.attn_w1, g.attn_b1, g.attn_w2, d_attn_b2);
    attend_backward(cache.attend_txt, cache.states, d_t, p.attn_w1, p.attn_w2, d_ht, d_states,
                    g.attn_w1, g.attn_b1, g.attn_w2, d_attn_b2);
    g.attn_b2[0] += d_attn_b2;

    affine_backward(p.vproj_w, input.image, d_hv, g.vproj_w, g.vproj_b, {});
    affine_backward(p.tproj_w, input.text, d_ht, g.tproj_w, g.tproj_b, {});
    for (std::size_t i = 0; i < n; ++i) {
      const auto d_pre = tanh_backward(cache.states[i], d_states[i]);
      affine_backward(p.comment_w, cache.state_inputs[i], d_pre, g.comment_w, g.comment_b, {});
    }
  }

  const auto d_pre2 = tanh_backward(cache.hf, d_hf);
  std::vector<double> d_h1(h, 0.0);
  affine_backward(p.base_w2, cache.h1, d_pre2, g.base_w2, g.base_b2, d_h1);
  const auto d_pre1 = tanh_backward(cache.h1, d_h1);
  affine_backward(p.base_w1, cache.x, d_pre1, g.base_w1, g.base_b1, {});
}

}  // namespace

FusionScheme scheme_from_string(const std::string& name) {
  if (name == "early") return FusionScheme::early;
  if (name == "late") return FusionScheme::late;
  throw ArgumentError("unknown fusion scheme: " + name + " (expected early or late)");
}

std::string to_string(FusionScheme scheme) {
  return scheme == FusionScheme::early ? "early" : "late";
}

FusionClassifier::FusionClassifier(const ClassifierConfig& config) : config_(config) {
  if (config.dim_image < 1 || config.dim_text < 1 || config.hidden < 1 ||
      config.attn_hidden < 1) {
    throw ArgumentError("classifier: dimensions must be positive");
  }
  if (config.classes < 2) throw ArgumentError("classifier: need at least two classes");
  build_blocks();
}

void FusionClassifier::build_blocks() {
  const int di = config_.dim_image;
  const int dt = config_.dim_text;
  const int h = config_.hidden;
  const int a = config_.attn_hidden;
  const int c = config_.classes;

  blocks_.clear();
  const auto push = [&](std::string name, int rows, int cols) {
    const std::size_t offset = blocks_.empty() ? 0 : blocks_.back().offset + blocks_.back().size();
    blocks_.push_back({std::move(name), offset, rows, cols});
  };

  push("base.w1", h, di + dt);
  push("base.b1", h, 1);
  push("base.w2", h, h);
  push("base.b2", h, 1);
  if (config_.scheme == FusionScheme::early) {
    push("img_proj.w", dt, di);
    push("img_proj.b", dt, 1);
    push("comment.w", h, 2 * dt);
    push("comment.b", h, 1);
  } else {
    push("v_proj.w", h, di);
    push("v_proj.b", h, 1);
    push("t_proj.w", h, dt);
    push("t_proj.b", h, 1);
    push("comment.w", h, dt);
    push("comment.b", h, 1);
  }
  push("attn.w1", a, 2 * h);  // sigma always scores [anchor;state], both width h
  push("attn.b1", a, 1);
  push("attn.w2", 1, a);
  push("attn.b2", 1, 1);
  push("head.w", c, config_.scheme == FusionScheme::early ? 2 * h : 3 * h);
  push("head.b", c, 1);

  params_.assign(blocks_.back().offset + blocks_.back().size(), 0.0);
}

FusionClassifier FusionClassifier::init(const ClassifierConfig& config, std::uint64_t seed) {
  FusionClassifier model(config);
  std::mt19937_64 rng(seed);
  for (const auto& block : model.blocks_) {
    const bool is_bias = block.name.substr(block.name.rfind('.') + 1).front() == 'b';
    if (is_bias) continue;  // biases stay zero
    const double bound = 1.0 / std::sqrt(static_cast<double>(block.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < block.size(); ++i) {
      model.params_[block.offset + i] = dist(rng);
    }
  }
  return model;
}

std::span<double> FusionClassifier::block(std::string_view name) {
  for (const auto& b : blocks_) {
    if (b.name == name) return {params_.data() + b.offset, b.size()};
  }
  throw StateError("unknown parameter block: " + std::string(name));
}

std::span<const double> FusionClassifier::block(std::string_view name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return {params_.data() + b.offset, b.size()};
  }
  throw StateError("unknown parameter block: " + std::string(name));
}

void FusionClassifier::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  binio::put_magic(out, "FCLS01", 6);
  binio::put_le<std::uint16_t>(out, 1);
  binio::put_le<std::uint8_t>(out, config_.scheme == FusionScheme::early ? 0 : 1);
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.dim_image));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.dim_text));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.hidden));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.attn_hidden));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_.classes));
  binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(blocks_.size()));
  for (const auto& block : blocks_) {
    binio::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(block.name.size()));
    out.write(block.name.data(), static_cast<std::streamsize>(block.name.size()));
    binio::put_le<std::uint64_t>(out, block.offset);
    binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(block.rows));
    binio::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(block.cols));
  }
  binio::put_le<std::uint64_t>(out, params_.size());
  for (double v : params_) binio::put_f64(out, v);
  if (!out) throw DataError("short write to checkpoint: " + path.string());
}

FusionClassifier FusionClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  binio::expect_magic(in, "FCLS01", 6, "checkpoint " + path.string());
  const auto version = binio::get_le<std::uint16_t>(in);
  if (version != 1) throw DataError("unsupported checkpoint version " + std::to_string(version));

  ClassifierConfig config;
  const auto scheme = binio::get_le<std::uint8_t>(in);
  if (scheme > 1) throw DataError("checkpoint carries unknown fusion scheme");
  config.scheme = scheme == 0 ? FusionScheme::early : FusionScheme::late;
  config.dim_image = static_cast<int>(binio::get_le<std::uint32_t>(in));
  config.dim_text = static_cast<int>(binio::get_le<std::uint32_t>(in));
  config.hidden = static_cast<int>(binio::get_le<std::uint32_t>(in));
  config.attn_hidden = static_cast<int>(binio::get_le<std::uint32_t>(in));
  config.classes = static_cast<int>(binio::get_le<std::uint32_t>(in));

  FusionClassifier model(config);
  const auto block_count = binio::get_le<std::uint32_t>(in);
  if (block_count != model.blocks_.size()) {
    throw DataError("checkpoint block table does not match the architecture");
  }
  for (const auto& expected : model.blocks_) {
    const auto name_len = binio::get_le<std::uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto offset = binio::get_le<std::uint64_t>(in);
    const auto rows = binio::get_le<std::uint32_t>(in);
    const auto cols = binio::get_le<std::uint32_t>(in);
    if (!in || name != expected.name || offset != expected.offset ||
        rows != static_cast<std::uint32_t>(expected.rows) ||
        cols != static_cast<std::uint32_t>(expected.cols)) {
      throw DataError("checkpoint block table does not match the architecture");
    }
  }
  const auto param_count = binio::get_le<std::uint64_t>(in);
  if (param_count != model.params_.size()) {
    throw DataError("checkpoint parameter count does not match the architecture");
  }
  for (auto& v : model.params_) v = binio::get_f64(in);
  return model;
}

std::uint64_t FusionClassifier::digest() const {
  std::uint64_t hash = 14695981039346656037ULL;
  for (double value : params_) {
    const auto bits = std::bit_cast<std::uint64_t>(value);
    for (int b = 0; b < 8; ++b) {
      hash ^= (bits >> (8 * b)) & 0xffULL;
      hash *= 1099511628211ULL;
    }
  }
  return hash;
}

ModelInput make_model_input(const PostRecord& post, const ConsensusSet& comments) {
  ModelInput input;
  input.image.assign(post.image_vec.begin(), post.image_vec.end());
  input.text.assign(post.text_vec.begin(), post.text_vec.end());
  input.comments.reserve(comments.entries.size());
  for (const auto& entry : comments.entries) {
    input.comments.emplace_back(entry.comment.vec.begin(), entry.comment.vec.end());
  }
  return input;
}

AttendResult attend_comments(std::span<const double> anchor,
                             const std::vector<std::vector<double>>& states,
                             std::span<const double> w1, std::span<const double> b1,
                             std::span<const double> w2, double b2) {
  auto cache = attend_forward(anchor, states, w1, b1, w2, b2);
  return {std::move(cache.attended), std::move(cache.betas)};
}

ForwardResult forward_classifier(const FusionClassifier& model, const ModelInput& input) {
  auto cache = run_forward(model, input);
  ForwardResult result;
  result.logits = std::move(cache.logits);
  result.betas = std::move(cache.attend_img.betas);
  if (model.config().scheme == FusionScheme::late) {
    result.betas_text = std::move(cache.attend_txt.betas);
  }
  return result;
}

int predict_class(const FusionClassifier& model, const ModelInput& input) {
  const auto result = forward_classifier(model, input);
  int best = 0;
  for (std::size_t c = 1; c < result.logits.size(); ++c) {
    if (result.logits[c] > result.logits[best]) best = static_cast<int>(c);
  }
  return best;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ArgumentError("softmax: empty logits");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - peak);
    total += probs[i];
  }
  for (auto& p : probs) p /= total;
  return probs;
}

namespace {

// log softmax with the same max-subtraction stabilization
std::vector<double> log_softmax(std::span<const double> logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (const double v : logits) total += std::exp(v - peak);
  const double lse = std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - peak - lse;
  return out;
}

}  // namespace

double cross_entropy_loss(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw ArgumentError("cross entropy: label out of range");
  }
  return -log_softmax(logits)[label];
}

SoftLabel make_soft_label(std::vector<double> probs) {
  if (probs.empty()) throw ArgumentError("soft label: empty distribution");
  double total = 0.0;
  for (const double p : probs) {
    if (!(p >= 0.0)) throw ArgumentError("soft label: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw ArgumentError("soft label: probabilities sum to " + std::to_string(total));
  }
  return {std::move(probs)};
}

double kl_loss(const SoftLabel& teacher, std::span<const double> student_logits) {
  if (teacher.probs.size() != student_logits.size()) {
    throw ArgumentError("kl: class counts differ between teacher and student");
  }
  const auto log_s = log_softmax(student_logits);
  double kl = 0.0;
  for (std::size_t c = 0; c < teacher.probs.size(); ++c) {
    const double t = teacher.probs[c];
    if (t > 0.0) kl += t * (std::log(t) - log_s[c]);
  }
  return kl;
}

BatchLoss batch_loss(const FusionClassifier& model, std::span<const TrainExample> batch,
                     std::vector<double>* grad) {
  if (batch.empty()) throw ArgumentError("batch loss: empty batch");

  BatchLoss totals;
  for (const auto& example : batch) {
    if (example.label) ++totals.labeled;
    if (example.soft) ++totals.soft;
  }
  if (totals.labeled == 0 && totals.soft == 0) {
    throw ArgumentError("batch loss: no example carries a label");
  }

  GradView g;
  if (grad != nullptr) {
    grad->assign(model.param_count(), 0.0);
    g = view_grads(model, *grad);
  }

  const int classes = model.config().classes;
  for (const auto& example : batch) {
    if (!example.label && !example.soft) continue;
    const auto cache = run_forward(model, example.input);
    std::vector<double> d_logits(classes, 0.0);
    const auto probs = softmax(cache.logits);

    if (example.label) {
      totals.ce += cross_entropy_loss(cache.logits, *example.label);
      for (int c = 0; c < classes; ++c) {
        d_logits[c] += (probs[c] - (c == *example.label ? 1.0 : 0.0)) / totals.labeled;
      }
    }
    if (example.soft) {
      if (example.soft->probs.size() != static_cast<std::size_t>(classes)) {
        throw ArgumentError("batch loss: soft label class count mismatch");
      }
      totals.kl += kl_loss(*example.soft, cache.logits);
      for (int c = 0; c < classes; ++c) {
        d_logits[c] += (probs[c] - example.soft->probs[c]) / totals.soft;
      }
    }
    if (grad != nullptr) run_backward(model, example.input, cache, d_logits, g);
  }

  if (totals.labeled > 0) totals.ce /= totals.labeled;
  if (totals.soft > 0) totals.kl /= totals.soft;
  totals.loss = totals.ce + totals.kl;
  return totals;
}

double grad_check(const FusionClassifier& model, std::span<const TrainExample> batch,
                  double eps) {
  std::vector<double> analytic;
  batch_loss(model, batch, &analytic);

  FusionClassifier probe = model;
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.params().size(); ++i) {
    const double saved = probe.params()[i];
    probe.params()[i] = saved + eps;
    const double up = batch_loss(probe, batch, nullptr).loss;
    probe.params()[i] = saved - eps;
    const double down = batch_loss(probe, batch, nullptr).loss;
    probe.params()[i] = saved;

    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

void adamw_step(std::vector<double>& params, std::span<const double> grads, AdamWState& state,
                const AdamWConfig& config) {
  if (grads.size() != params.size()) {
    throw ArgumentError("adamw: gradient size does not match parameters");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ArgumentError("adamw: optimizer state does not match parameters");
  }
  for (const double g : grads) {
    if (!std::isfinite(g)) throw StateError("adamw: non-finite gradient, step aborted");
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grads[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -=
        config.lr * (m_hat / (std::sqrt(v_hat) + config.eps) + config.weight_decay * params[i]);
  }
}

}  // namespace xmc
