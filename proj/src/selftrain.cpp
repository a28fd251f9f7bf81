#include "xmc/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

#include "xmc/error.hpp"
#include "xmc/parallel.hpp"

namespace xmc {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0x94d049bb133111ebULL * (b + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

void check_config(const SelfTrainConfig& config) {
  if (config.iterations < 0) throw ArgumentError("self-training: iterations must be >= 0");
  if (config.epochs_per_phase < 0) throw ArgumentError("self-training: epochs must be >= 0");
  if (config.batch_size < 1) throw ArgumentError("self-training: batch size must be >= 1");
  if (!(config.dropout_rate >= 0.0 && config.dropout_rate < 1.0)) {
    throw ArgumentError("self-training: dropout rate must lie in [0,1)");
  }
}

void check_labeled(const LabeledSet& items, int classes, const char* what) {
  if (items.empty()) throw DataError(std::string(what) + " set is empty");
  for (const auto& item : items) {
    if (!item.post.label || *item.post.label < 0 || *item.post.label >= classes) {
      throw DataError(std::string(what) + " set: post " + item.post.post_id +
                      " lacks a usable label");
    }
    if (item.comments.entries.empty()) {
      throw DataError(std::string(what) + " set: post " + item.post.post_id +
                      " has no consensus comments");
    }
  }
}

}  // namespace

ValidationMetric validation_metric_from_string(const std::string& name) {
  if (name == "macro-f1") return ValidationMetric::macro_f1;
  if (name == "accuracy") return ValidationMetric::accuracy;
  throw ArgumentError("unknown validation metric: " + name + " (expected macro-f1 or accuracy)");
}

std::string to_string(ValidationMetric metric) {
  return metric == ValidationMetric::macro_f1 ? "macro-f1" : "accuracy";
}

std::string to_string(PhaseRole role) {
  return role == PhaseRole::teacher ? "teacher" : "student";
}

ConsensusSet drop_comments(const ConsensusSet& comments, double rate, std::mt19937_64& rng) {
  if (comments.entries.empty()) throw ArgumentError("dropout: empty comment set");
  if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout: rate must lie in [0,1)");
  if (rate == 0.0) return comments;

  ConsensusSet kept;
  kept.requested = comments.requested;
  std::bernoulli_distribution drop(rate);
  for (const auto& entry : comments.entries) {
    if (!drop(rng)) kept.entries.push_back(entry);
  }
  if (kept.entries.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, comments.entries.size() - 1);
    kept.entries.push_back(comments.entries[pick(rng)]);
  }
  return kept;
}

PseudoLabelStats pseudo_label(const FusionClassifier& teacher, UnlabeledSet& unlabeled) {
  PseudoLabelStats stats;
  parallel_for(unlabeled.size(), [&](std::size_t i) {
    auto& item = unlabeled[i];
    if (item.comments.entries.empty()) {
      item.teacher_label.reset();
      return;
    }
    const auto result = forward_classifier(teacher, make_model_input(item.post, item.comments));
    item.teacher_label = SoftLabel{softmax(result.logits)};
  });
  for (const auto& item : unlabeled) {
    if (item.teacher_label) {
      ++stats.labeled;
    } else {
      ++stats.skipped_empty;
    }
  }
  if (stats.skipped_empty > 0) {
    std::cerr << "pseudo-label: skipped " << stats.skipped_empty
              << " items without consensus comments\n";
  }
  return stats;
}

double validation_score(const FusionClassifier& model, const LabeledSet& items,
                        ValidationMetric metric) {
  const auto report = evaluate_model(model, items);
  return metric == ValidationMetric::macro_f1 ? report.macro_f1 : report.accuracy;
}

MetricsReport evaluate_model(const FusionClassifier& model, const LabeledSet& items) {
  check_labeled(items, model.config().classes, "evaluation");
  std::vector<int> preds(items.size());
  std::vector<int> golds(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    preds[i] = predict_class(model, make_model_input(items[i].post, items[i].comments));
    golds[i] = *items[i].post.label;
  });
  return compute_metrics(preds, golds, model.config().classes);
}

PhaseResult train_phase(const FusionClassifier& initial, const LabeledSet& labeled,
                        const LabeledSet& validation, const UnlabeledSet* unlabeled,
                        const SelfTrainConfig& config, PhaseRole role, std::uint64_t phase_seed) {
  check_config(config);
  const int classes = initial.config().classes;
  check_labeled(labeled, classes, "training");
  check_labeled(validation, classes, "validation");
  if (role == PhaseRole::teacher && unlabeled != nullptr) {
    throw ArgumentError("train phase: the teacher never sees unlabeled data");
  }

  PhaseResult result;
  result.model = initial;
  if (config.epochs_per_phase == 0) return result;

  // pseudo-labeled items usable for the KL term
  std::vector<std::size_t> usable;
  if (role == PhaseRole::student && unlabeled != nullptr) {
    for (std::size_t i = 0; i < unlabeled->size(); ++i) {
      if ((*unlabeled)[i].teacher_label) usable.push_back(i);
    }
  }

  std::mt19937_64 rng(phase_seed);
  FusionClassifier model = initial;
  AdamWState opt;
  std::vector<std::size_t> l_order(labeled.size());
  std::iota(l_order.begin(), l_order.end(), 0u);
  std::vector<std::size_t> u_order(usable.size());
  std::iota(u_order.begin(), u_order.end(), 0u);

  const bool drops = role == PhaseRole::student && config.dropout_rate > 0.0;
  std::vector<double> grad;
  double best_val = -std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= config.epochs_per_phase; ++epoch) {
    std::shuffle(l_order.begin(), l_order.end(), rng);
    if (!u_order.empty()) std::shuffle(u_order.begin(), u_order.end(), rng);
    std::size_t u_cursor = 0;

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < l_order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(l_order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<TrainExample> batch;
      batch.reserve(stop - start + config.batch_size);
      for (std::size_t i = start; i < stop; ++i) {
        const auto& item = labeled[l_order[i]];
        TrainExample example;
        example.input = make_model_input(
            item.post,
            drops ? drop_comments(item.comments, config.dropout_rate, rng) : item.comments);
        example.label = *item.post.label;
        batch.push_back(std::move(example));
      }
      if (!u_order.empty()) {
        for (int take = 0; take < config.batch_size; ++take) {
          const auto& item = (*unlabeled)[usable[u_order[u_cursor]]];
          u_cursor = (u_cursor + 1) % u_order.size();
          TrainExample example;
          example.input = make_model_input(
              item.post,
              drops ? drop_comments(item.comments, config.dropout_rate, rng) : item.comments);
          example.soft = item.teacher_label;
          batch.push_back(std::move(example));
        }
      }

      const auto losses = batch_loss(model, batch, &grad);
      if (!std::isfinite(losses.loss)) {
        throw StateError("train phase: non-finite loss at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(batches) + " (" + to_string(role) + ")");
      }
      adamw_step(model.params(), grad, opt, config.optimizer);
      loss_sum += losses.loss;
      ++batches;
    }

    const double val = validation_score(model, validation, config.validation_metric);
    result.history.push_back({epoch, loss_sum / batches, val});
    if (val > best_val) {
      best_val = val;
      result.best_epoch = epoch;
      result.model = model;
    }
  }

  result.best_val = best_val;
  return result;
}

SelfTrainResult self_train_loop(const LabeledSet& labeled, const LabeledSet& validation,
                                UnlabeledSet unlabeled, const ClassifierConfig& arch,
                                const SelfTrainConfig& config) {
  check_config(config);
  check_labeled(labeled, arch.classes, "training");
  check_labeled(validation, arch.classes, "validation");
  for (auto& item : unlabeled) item.teacher_label.reset();

  SelfTrainResult result;
  const auto run_phase = [&](const FusionClassifier& start, const UnlabeledSet* u, PhaseRole role,
                             int iteration, std::uint64_t salt) {
    auto phase =
        train_phase(start, labeled, validation, u, config, role, mix_seed(config.seed, iteration, salt));
    PhaseRecord record;
    record.iteration = iteration;
    record.role = role;
    record.history = std::move(phase.history);
    record.best_val = phase.best_val;
    record.best_epoch = phase.best_epoch;
    record.init_digest = start.digest();
    record.best_digest = phase.model.digest();
    result.phases.push_back(std::move(record));
    return std::move(phase.model);
  };

  FusionClassifier current = run_phase(FusionClassifier::init(arch, mix_seed(config.seed, 0, 0)),
                                       nullptr, PhaseRole::teacher, 0, 1);
  result.best_val = result.phases.back().best_val;

  for (int it = 1; it <= config.iterations; ++it) {
    if (it > 1) {
      // the promoted student becomes the teacher after a fine-tune on L
      current = run_phase(current, nullptr, PhaseRole::teacher, it, 2);
    }
    const auto stats = pseudo_label(current, unlabeled);
    current = run_phase(FusionClassifier::init(arch, mix_seed(config.seed, it, 3)), &unlabeled,
                        PhaseRole::student, it, 4);
    result.phases.back().pseudo = stats;
    result.best_val = result.phases.back().best_val;
  }

  result.model = std::move(current);
  return result;
}

}  // namespace xmc
