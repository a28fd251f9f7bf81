#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xmc/consensus.hpp"
#include "xmc/corpus.hpp"
#include "xmc/metrics.hpp"
#include "xmc/neural.hpp"

namespace xmc {

// A post paired with the consensus comments retrieved for it
struct LabeledItem {
  PostRecord post;  // label set
  ConsensusSet comments;
};

// A retrieved post; inherits the consensus set of its source query and picks
// up a teacher soft label during pseudo-labeling
struct UnlabeledItem {
  PostRecord post;
  ConsensusSet comments;
  std::string source_query_id;
  std::optional<SoftLabel> teacher_label;
};

using LabeledSet = std::vector<LabeledItem>;
using UnlabeledSet = std::vector<UnlabeledItem>;

enum class ValidationMetric { macro_f1, accuracy };

ValidationMetric validation_metric_from_string(const std::string& name);
std::string to_string(ValidationMetric metric);

struct SelfTrainConfig {
  int iterations = 3;
  int epochs_per_phase = 10;
  int retrieved_per_query = 5;  // K
  int consensus_size = 5;       // N
  double dropout_rate = 0.5;
  int batch_size = 8;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  ValidationMetric validation_metric = ValidationMetric::macro_f1;
};

// Independent Bernoulli(rate) drop per comment; if everything is dropped one
// survivor is drawn uniformly so attention still has an input. rate == 0
// returns the set untouched without consuming rng.
ConsensusSet drop_comments(const ConsensusSet& comments, double rate, std::mt19937_64& rng);

struct PseudoLabelStats {
  int labeled = 0;
  int skipped_empty = 0;  // items with no consensus comments get no label
};

// Fills teacher_label with softmax(teacher logits) using the full comment
// sets. Existing labels are overwritten.
PseudoLabelStats pseudo_label(const FusionClassifier& teacher, UnlabeledSet& unlabeled);

enum class PhaseRole { teacher, student };

std::string to_string(PhaseRole role);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct PhaseResult {
  FusionClassifier model;  // checkpoint of the best validation epoch
  std::vector<EpochRecord> history;
  double best_val = 0.0;
  int best_epoch = -1;  // -1 when no epochs ran
};

// One training phase. Teacher: cross entropy on the labeled set, full
// comments. Student: each step pairs a labeled batch with a cycled
// pseudo-labeled batch (mean CE + mean KL) and drops comments on its inputs.
// Validation always sees full comments; ties keep the earlier epoch.
PhaseResult train_phase(const FusionClassifier& initial, const LabeledSet& labeled,
                        const LabeledSet& validation, const UnlabeledSet* unlabeled,
                        const SelfTrainConfig& config, PhaseRole role, std::uint64_t phase_seed);

double validation_score(const FusionClassifier& model, const LabeledSet& items,
                        ValidationMetric metric);
MetricsReport evaluate_model(const FusionClassifier& model, const LabeledSet& items);

struct PhaseRecord {
  int iteration = 0;  // 0 is the base teacher trained on L alone
  PhaseRole role = PhaseRole::teacher;
  std::vector<EpochRecord> history;
  double best_val = 0.0;
  int best_epoch = -1;
  std::uint64_t init_digest = 0;  // parameters the phase started from
  std::uint64_t best_digest = 0;  // parameters of the returned checkpoint
  PseudoLabelStats pseudo;        // student phases only
};

struct SelfTrainResult {
  FusionClassifier model;  // the last promoted checkpoint
  std::vector<PhaseRecord> phases;
  double best_val = 0.0;  // validation metric of the returned model
};

// Teacher-student loop: train the base teacher on L; per iteration
// re-fine-tune the current teacher on L (from the second iteration on),
// pseudo-label U, train a freshly initialized student on CE + KL, promote it.
// iterations == 0 returns the base teacher.
SelfTrainResult self_train_loop(const LabeledSet& labeled, const LabeledSet& validation,
                                UnlabeledSet unlabeled, const ClassifierConfig& arch,
                                const SelfTrainConfig& config);

}  // namespace xmc
