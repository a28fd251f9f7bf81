#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xmc/consensus.hpp"
#include "xmc/corpus.hpp"

namespace xmc {

enum class FusionScheme { early, late };

FusionScheme scheme_from_string(const std::string& name);
std::string to_string(FusionScheme scheme);

struct ClassifierConfig {
  FusionScheme scheme = FusionScheme::early;
  int dim_image = 64;
  int dim_text = 32;
  int hidden = 16;       // H
  int attn_hidden = 32;  // A
  int classes = 2;       // C

  bool operator==(const ClassifierConfig&) const = default;
};

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;  // weight blocks are rows x cols; biases have cols == 1

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Comment-attentive classifier over precomputed embeddings, double precision.
//
// Shared base: h1 = tanh(W1 [img;txt] + b1), hf = tanh(W2 h1 + b2).
// Attention scorer sigma: z = w2 . tanh(W1 [anchor;state] + b1) + b2.
// early: p = Wp img + bp (image projected into comment space),
//        state_n = tanh(Wc [p;c_n] + bc), u = attend(hf, states),
//        logits = Wh [hf;u] + bh.
// late:  hv = Wv img + bv, ht = Wt txt + bt (linear anchors),
//        state_n = tanh(Wc c_n + bc), v = attend(hv, .), t = attend(ht, .)
//        with one shared sigma, logits = Wh [v;t;hf] + bh.
class FusionClassifier {
 public:
  FusionClassifier() = default;
  explicit FusionClassifier(const ClassifierConfig& config);  // all-zero parameters

  // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases
  static FusionClassifier init(const ClassifierConfig& config, std::uint64_t seed);

  const ClassifierConfig& config() const { return config_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t param_count() const { return params_.size(); }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::span<double> block(std::string_view name);
  std::span<const double> block(std::string_view name) const;

  void save(const std::filesystem::path& path) const;
  static FusionClassifier load(const std::filesystem::path& path);

  // FNV-1a over the raw parameter bytes; cheap identity check
  std::uint64_t digest() const;

 private:
  void build_blocks();

  ClassifierConfig config_;
  std::vector<ParamBlock> blocks_;
  std::vector<double> params_;
};

// One example as the network consumes it (embeddings widened to double)
struct ModelInput {
  std::vector<double> image;
  std::vector<double> text;
  std::vector<std::vector<double>> comments;
};

ModelInput make_model_input(const PostRecord& post, const ConsensusSet& comments);

struct AttendResult {
  std::vector<double> attended;  // u
  std::vector<double> betas;
};

// z_n = sigma(anchor, state_n), betas = softmax(z), u = sum betas_n state_n.
// sigma parameters are passed explicitly so tests can pin them.
AttendResult attend_comments(std::span<const double> anchor,
                             const std::vector<std::vector<double>>& states,
                             std::span<const double> w1, std::span<const double> b1,
                             std::span<const double> w2, double b2);

struct ForwardResult {
  std::vector<double> logits;
  std::vector<double> betas;       // image-anchored attention (the only one, early)
  std::vector<double> betas_text;  // text-anchored attention, late scheme only
};

ForwardResult forward_classifier(const FusionClassifier& model, const ModelInput& input);

// argmax of the logits, lowest class on ties
int predict_class(const FusionClassifier& model, const ModelInput& input);

std::vector<double> softmax(std::span<const double> logits);

double cross_entropy_loss(std::span<const double> logits, int label);

struct SoftLabel {
  std::vector<double> probs;

  bool operator==(const SoftLabel&) const = default;
};

// throws on negative entries or a sum off 1 by more than 1e-6
SoftLabel make_soft_label(std::vector<double> probs);

// KL(teacher || softmax(student_logits)), 0 ln 0 = 0
double kl_loss(const SoftLabel& teacher, std::span<const double> student_logits);

struct TrainExample {
  ModelInput input;
  std::optional<int> label;      // gold label, CE term
  std::optional<SoftLabel> soft;  // teacher label, KL term
};

struct BatchLoss {
  double loss = 0.0;  // ce + kl
  double ce = 0.0;    // mean over labeled examples, 0 if none
  double kl = 0.0;    // mean over soft-labeled examples, 0 if none
  int labeled = 0;
  int soft = 0;
};

// Loss of the batch; when grad is non-null it receives d loss / d params
// (resized and zeroed first). Accumulation order is the batch order.
BatchLoss batch_loss(const FusionClassifier& model, std::span<const TrainExample> batch,
                     std::vector<double>* grad);

// max over parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
// with central differences of half-width eps
double grad_check(const FusionClassifier& model, std::span<const TrainExample> batch, double eps);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  bool operator==(const AdamWConfig&) const = default;
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

// Decoupled weight decay; bias-corrected moments. Rejects non-finite
// gradients before touching params or state.
void adamw_step(std::vector<double>& params, std::span<const double> grads, AdamWState& state,
                const AdamWConfig& config);

}  // namespace xmc
