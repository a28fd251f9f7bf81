#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "xmc/error.hpp"
#include "xmc/selftrain.hpp"

using namespace xmc;

namespace {

ConsensusSet consensus_of(const PostRecord& post) {
  ConsensusSet set;
  set.requested = int(post.comments.size());
  for (const auto& c : post.comments) set.entries.push_back({c, 0.0});
  return set;
}

LabeledSet labeled_from_split(const Corpus& corpus, Split split) {
  LabeledSet out;
  for (const auto& post : corpus.posts) {
    if (post.split != split) continue;
    out.push_back({post, consensus_of(post)});
  }
  return out;
}

UnlabeledSet unlabeled_from_wild(const Corpus& corpus, std::size_t limit) {
  UnlabeledSet out;
  for (const auto& post : corpus.posts) {
    if (post.split != Split::wild || out.size() >= limit) continue;
    out.push_back({post, consensus_of(post), "q0", std::nullopt});
  }
  return out;
}

Corpus small_corpus(std::uint64_t seed) {
  SynthConfig synth;
  synth.classes = 2;
  synth.train_per_class = 12;
  synth.val_per_class = 6;
  synth.test_per_class = 6;
  synth.wild_per_class = 15;
  synth.dim_image = 8;
  synth.dim_text = 6;
  synth.min_comments = 2;
  synth.max_comments = 4;
  return normalize_vectors(generate_synthetic_corpus(synth, seed));
}

ClassifierConfig arch_for(const Corpus& corpus) {
  ClassifierConfig config;
  config.dim_image = corpus.dim_image;
  config.dim_text = corpus.dim_text;
  config.hidden = 8;
  config.attn_hidden = 4;
  config.classes = corpus.class_count;
  return config;
}

ConsensusSet five_comments() {
  PostRecord post;
  post.post_id = "p";
  for (int j = 0; j < 5; ++j) {
    CommentRecord c;
    c.comment_id = "c" + std::to_string(j);
    c.vec = {1.0f, 0.0f};
    post.comments.push_back(c);
  }
  return consensus_of(post);
}

}  // namespace

TEST_CASE("drop_comments: rate zero is the identity and consumes no randomness") {
  const ConsensusSet set = five_comments();
  std::mt19937_64 used(5), untouched(5);
  const ConsensusSet kept = drop_comments(set, 0.0, used);
  CHECK(kept == set);
  CHECK(used() == untouched());
}

TEST_CASE("drop_comments: a single comment always survives") {
  ConsensusSet set;
  CommentRecord c;
  c.comment_id = "only";
  c.vec = {1.0f};
  set.entries.push_back({c, 0.5});
  set.requested = 1;

  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const ConsensusSet kept = drop_comments(set, 0.9, rng);
    REQUIRE(kept.entries.size() == 1);
    CHECK(kept.entries[0].comment.comment_id == "only");
  }
}

TEST_CASE("drop_comments: kept sets are ordered subsets") {
  const ConsensusSet set = five_comments();
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const ConsensusSet kept = drop_comments(set, 0.5, rng);
    REQUIRE_FALSE(kept.entries.empty());
    // order preserved, no duplicates, all drawn from the original
    std::size_t cursor = 0;
    for (const auto& entry : kept.entries) {
      while (cursor < set.entries.size() &&
             set.entries[cursor].comment.comment_id != entry.comment.comment_id) {
        ++cursor;
      }
      REQUIRE(cursor < set.entries.size());
      ++cursor;
    }
  }
}

TEST_CASE("drop_comments: Monte-Carlo kept fraction at rate one half") {
  const ConsensusSet set = five_comments();
  std::mt19937_64 rng(8);
  double kept_total = 0.0;
  const int trials = 10000;
  for (int trial = 0; trial < trials; ++trial) {
    kept_total += double(drop_comments(set, 0.5, rng).entries.size()) / 5.0;
  }
  const double lib_mean = kept_total / trials;

  // independent simulation of the same rule
  std::mt19937_64 sim_rng(999);
  std::bernoulli_distribution dropped(0.5);
  double sim_total = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    int kept = 0;
    for (int j = 0; j < 5; ++j) {
      if (!dropped(sim_rng)) ++kept;
    }
    if (kept == 0) kept = 1;  // fallback
    sim_total += double(kept) / 5.0;
  }
  const double sim_mean = sim_total / trials;

  CHECK(std::abs(lib_mean - sim_mean) <= 0.02);
  // analytic expectation: 5*(1/2) plus the all-dropped fallback mass 2^-5
  CHECK(std::abs(lib_mean - 0.50625) <= 0.02);
}

TEST_CASE("drop_comments: same seed, same draws") {
  const ConsensusSet set = five_comments();
  std::mt19937_64 a(99), b(99);
  for (int trial = 0; trial < 100; ++trial) {
    CHECK(drop_comments(set, 0.5, a) == drop_comments(set, 0.5, b));
  }
}

TEST_CASE("drop_comments: validation") {
  const ConsensusSet set = five_comments();
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(drop_comments(ConsensusSet{}, 0.5, rng), ArgumentError);
  CHECK_THROWS_AS(drop_comments(set, 1.0, rng), ArgumentError);
  CHECK_THROWS_AS(drop_comments(set, -0.1, rng), ArgumentError);
}

TEST_CASE("pseudo_label: labels are softmax outputs of the teacher") {
  const Corpus corpus = small_corpus(11);
  const ClassifierConfig arch = arch_for(corpus);
  const FusionClassifier teacher = FusionClassifier::init(arch, 3);

  UnlabeledSet unlabeled = unlabeled_from_wild(corpus, 12);
  // one item with no comments: must be skipped and left unlabeled
  unlabeled[3].comments = ConsensusSet{};
  unlabeled[3].teacher_label = make_soft_label({0.5, 0.5});  // stale label to clear

  const PseudoLabelStats stats = pseudo_label(teacher, unlabeled);
  CHECK(stats.labeled == 11);
  CHECK(stats.skipped_empty == 1);
  CHECK_FALSE(unlabeled[3].teacher_label.has_value());

  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    if (i == 3) continue;
    REQUIRE(unlabeled[i].teacher_label.has_value());
    const auto& probs = unlabeled[i].teacher_label->probs;
    double total = 0.0;
    for (double p : probs) {
      CHECK(p >= 0.0);
      total += p;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));

    // direct recomputation oracle
    const ModelInput input = make_model_input(unlabeled[i].post, unlabeled[i].comments);
    const auto logits = forward_classifier(teacher, input).logits;
    const auto want = softmax(logits);
    for (std::size_t c = 0; c < want.size(); ++c) {
      CHECK(probs[c] == doctest::Approx(want[c]).epsilon(1e-10));
    }
  }

  // identical inputs get identical labels
  UnlabeledSet twins = {unlabeled[0], unlabeled[0]};
  pseudo_label(teacher, twins);
  CHECK(twins[0].teacher_label->probs == twins[1].teacher_label->probs);
}

TEST_CASE("train_phase: zero epochs return the initial model untouched") {
  const Corpus corpus = small_corpus(12);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const FusionClassifier initial = FusionClassifier::init(arch_for(corpus), 4);

  SelfTrainConfig config;
  config.epochs_per_phase = 0;
  const PhaseResult result =
      train_phase(initial, train, val, nullptr, config, PhaseRole::teacher, 17);
  CHECK(result.model.params() == initial.params());
  CHECK(result.model.digest() == initial.digest());
  CHECK(result.history.empty());
  CHECK(result.best_epoch == -1);
}

TEST_CASE("train_phase: validation and error paths") {
  const Corpus corpus = small_corpus(13);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const FusionClassifier initial = FusionClassifier::init(arch_for(corpus), 5);
  SelfTrainConfig config;
  config.epochs_per_phase = 1;

  UnlabeledSet unlabeled = unlabeled_from_wild(corpus, 4);
  CHECK_THROWS_AS(train_phase(initial, train, val, &unlabeled, config, PhaseRole::teacher, 1),
                  ArgumentError);
  CHECK_THROWS_AS(train_phase(initial, {}, val, nullptr, config, PhaseRole::teacher, 1),
                  DataError);

  LabeledSet missing_comments = train;
  missing_comments[0].comments = ConsensusSet{};
  CHECK_THROWS_AS(
      train_phase(initial, missing_comments, val, nullptr, config, PhaseRole::teacher, 1),
      DataError);

  LabeledSet missing_label = train;
  missing_label[0].post.label.reset();
  CHECK_THROWS_AS(
      train_phase(initial, missing_label, val, nullptr, config, PhaseRole::teacher, 1),
      DataError);

  SelfTrainConfig bad = config;
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(train_phase(initial, train, val, nullptr, bad, PhaseRole::teacher, 1),
                  ArgumentError);

  // a poisoned parameter turns the first loss non-finite
  FusionClassifier poisoned = initial;
  poisoned.params()[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(train_phase(poisoned, train, val, nullptr, config, PhaseRole::teacher, 1),
                  StateError);
}

TEST_CASE("train_phase: teacher trajectory equals a student with no unlabeled data") {
  const Corpus corpus = small_corpus(14);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const FusionClassifier initial = FusionClassifier::init(arch_for(corpus), 6);

  SelfTrainConfig config;
  config.epochs_per_phase = 3;
  config.dropout_rate = 0.0;
  config.batch_size = 4;

  const PhaseResult teacher =
      train_phase(initial, train, val, nullptr, config, PhaseRole::teacher, 23);
  const UnlabeledSet empty;
  const PhaseResult student =
      train_phase(initial, train, val, &empty, config, PhaseRole::student, 23);

  CHECK(teacher.model.params() == student.model.params());
  CHECK(teacher.best_val == student.best_val);
  CHECK(teacher.best_epoch == student.best_epoch);
  REQUIRE(teacher.history.size() == student.history.size());
  for (std::size_t e = 0; e < teacher.history.size(); ++e) {
    CHECK(teacher.history[e].train_loss == student.history[e].train_loss);
    CHECK(teacher.history[e].val_metric == student.history[e].val_metric);
  }
}

TEST_CASE("train_phase: dropout never touches the teacher") {
  const Corpus corpus = small_corpus(15);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const FusionClassifier initial = FusionClassifier::init(arch_for(corpus), 7);

  SelfTrainConfig quiet;
  quiet.epochs_per_phase = 2;
  quiet.dropout_rate = 0.0;
  SelfTrainConfig noisy = quiet;
  noisy.dropout_rate = 0.9;

  const PhaseResult a = train_phase(initial, train, val, nullptr, quiet, PhaseRole::teacher, 31);
  const PhaseResult b = train_phase(initial, train, val, nullptr, noisy, PhaseRole::teacher, 31);
  CHECK(a.model.params() == b.model.params());
}

TEST_CASE("train_phase: history bookkeeping and best-checkpoint selection") {
  const Corpus corpus = small_corpus(16);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const FusionClassifier initial = FusionClassifier::init(arch_for(corpus), 8);

  SelfTrainConfig config;
  config.epochs_per_phase = 5;

  const PhaseResult result =
      train_phase(initial, train, val, nullptr, config, PhaseRole::teacher, 37);
  REQUIRE(result.history.size() == 5);
  double best = -1.0;
  int best_epoch = -1;
  for (std::size_t e = 0; e < result.history.size(); ++e) {
    CHECK(result.history[e].epoch == int(e) + 1);
    if (result.history[e].val_metric > best) {
      best = result.history[e].val_metric;
      best_epoch = int(e) + 1;
    }
  }
  CHECK(result.best_val == best);
  CHECK(result.best_epoch == best_epoch);  // strict improvement keeps the earlier epoch
  // the returned model really is the best-epoch checkpoint
  CHECK(validation_score(result.model, val, config.validation_metric) ==
        doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("train_phase: descent smoke on the separable synthetic task") {
  const Corpus corpus = small_corpus(17);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const FusionClassifier initial = FusionClassifier::init(arch_for(corpus), 9);

  SelfTrainConfig config;
  config.epochs_per_phase = 10;
  config.optimizer.lr = 1e-2;

  auto mean_ce = [&](const FusionClassifier& model) {
    std::vector<TrainExample> batch;
    for (const auto& item : train) {
      TrainExample example;
      example.input = make_model_input(item.post, item.comments);
      example.label = item.post.label;
      batch.push_back(std::move(example));
    }
    return batch_loss(model, batch, nullptr).ce;
  };

  const PhaseResult result =
      train_phase(initial, train, val, nullptr, config, PhaseRole::teacher, 41);
  CHECK(mean_ce(result.model) < mean_ce(initial));
  CHECK(result.history.back().train_loss < result.history.front().train_loss);
}

TEST_CASE("evaluate_model and validation_score agree with the metrics module") {
  const Corpus corpus = small_corpus(18);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const FusionClassifier model = FusionClassifier::init(arch_for(corpus), 10);

  std::vector<int> preds, golds;
  for (const auto& item : val) {
    preds.push_back(predict_class(model, make_model_input(item.post, item.comments)));
    golds.push_back(*item.post.label);
  }
  const MetricsReport want = compute_metrics(preds, golds, corpus.class_count);
  const MetricsReport got = evaluate_model(model, val);
  CHECK(got.accuracy == doctest::Approx(want.accuracy).epsilon(1e-12));
  CHECK(got.macro_f1 == doctest::Approx(want.macro_f1).epsilon(1e-12));

  CHECK(validation_score(model, val, ValidationMetric::macro_f1) ==
        doctest::Approx(want.macro_f1).epsilon(1e-12));
  CHECK(validation_score(model, val, ValidationMetric::accuracy) ==
        doctest::Approx(want.accuracy).epsilon(1e-12));

  CHECK(validation_metric_from_string("macro-f1") == ValidationMetric::macro_f1);
  CHECK(validation_metric_from_string("accuracy") == ValidationMetric::accuracy);
  CHECK_THROWS_AS(validation_metric_from_string("auc"), ArgumentError);
}

TEST_CASE("self_train_loop: zero iterations return the base teacher") {
  const Corpus corpus = small_corpus(19);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const UnlabeledSet unlabeled = unlabeled_from_wild(corpus, 20);

  SelfTrainConfig config;
  config.iterations = 0;
  config.epochs_per_phase = 2;

  const SelfTrainResult result =
      self_train_loop(train, val, unlabeled, arch_for(corpus), config);
  REQUIRE(result.phases.size() == 1);
  CHECK(result.phases[0].iteration == 0);
  CHECK(result.phases[0].role == PhaseRole::teacher);
  CHECK(result.model.digest() == result.phases[0].best_digest);
  CHECK(result.best_val == result.phases[0].best_val);
}

TEST_CASE("self_train_loop: phase chain, promotion digests, determinism") {
  const Corpus corpus = small_corpus(20);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const UnlabeledSet unlabeled = unlabeled_from_wild(corpus, 20);
  const ClassifierConfig arch = arch_for(corpus);

  SelfTrainConfig config;
  config.iterations = 2;
  config.epochs_per_phase = 2;
  config.batch_size = 4;
  config.seed = 91;

  const SelfTrainResult a = self_train_loop(train, val, unlabeled, arch, config);
  const SelfTrainResult b = self_train_loop(train, val, unlabeled, arch, config);

  // base teacher, student(1), teacher refit(2), student(2)
  REQUIRE(a.phases.size() == 4);
  CHECK(a.phases[0].role == PhaseRole::teacher);
  CHECK(a.phases[0].iteration == 0);
  CHECK(a.phases[1].role == PhaseRole::student);
  CHECK(a.phases[1].iteration == 1);
  CHECK(a.phases[2].role == PhaseRole::teacher);
  CHECK(a.phases[2].iteration == 2);
  CHECK(a.phases[3].role == PhaseRole::student);
  CHECK(a.phases[3].iteration == 2);

  // the promoted student is the teacher the next phase fine-tunes
  CHECK(a.phases[2].init_digest == a.phases[1].best_digest);
  // the loop returns the last promoted student checkpoint, bit-identical
  CHECK(a.model.digest() == a.phases[3].best_digest);
  CHECK(a.best_val == a.phases[3].best_val);

  // student phases actually pseudo-labeled the pool
  CHECK(a.phases[1].pseudo.labeled == 20);
  CHECK(a.phases[3].pseudo.labeled == 20);

  // pure function of (data, config, seed)
  CHECK(a.model.params() == b.model.params());
  REQUIRE(a.phases.size() == b.phases.size());
  for (std::size_t p = 0; p < a.phases.size(); ++p) {
    CHECK(a.phases[p].init_digest == b.phases[p].init_digest);
    CHECK(a.phases[p].best_digest == b.phases[p].best_digest);
    CHECK(a.phases[p].best_val == b.phases[p].best_val);
  }

  // a different seed moves the trajectory
  SelfTrainConfig other = config;
  other.seed = 92;
  const SelfTrainResult c = self_train_loop(train, val, unlabeled, arch, other);
  CHECK_FALSE(a.model.params() == c.model.params());
}

TEST_CASE("self_train_loop: learns the separable synthetic task") {
  const Corpus corpus = small_corpus(21);
  const LabeledSet train = labeled_from_split(corpus, Split::train);
  const LabeledSet val = labeled_from_split(corpus, Split::val);
  const LabeledSet test = labeled_from_split(corpus, Split::test);
  const UnlabeledSet unlabeled = unlabeled_from_wild(corpus, 30);

  SelfTrainConfig config;
  config.iterations = 1;
  config.epochs_per_phase = 8;
  config.optimizer.lr = 1e-2;
  config.seed = 7;

  const SelfTrainResult result =
      self_train_loop(train, val, unlabeled, arch_for(corpus), config);
  const MetricsReport report = evaluate_model(result.model, test);
  CHECK(report.macro_f1 > 0.7);
}
