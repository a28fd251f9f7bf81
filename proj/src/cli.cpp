#include "xmc/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "xmc/consensus.hpp"
#include "xmc/corpus.hpp"
#include "xmc/error.hpp"
#include "xmc/metrics.hpp"
#include "xmc/neural.hpp"
#include "xmc/parallel.hpp"
#include "xmc/selftrain.hpp"
#include "xmc/vecindex.hpp"
#include "xmc/xsearch.hpp"

namespace xmc {

namespace {

using json = nlohmann::ordered_json;

// "-" or empty selects stdout
class OutputFile {
 public:
  explicit OutputFile(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_.open(path, std::ios::binary);  // binary: keep \n on every platform
      if (!file_) throw DataError("cannot open output file: " + path);
      out_ = &file_;
    }
  }

  std::ostream& stream() { return *out_; }

 private:
  std::ofstream file_;
  std::ostream* out_ = &std::cout;
};

std::vector<PostRecord> collect_queries(const Corpus& corpus, const std::string& split_name) {
  std::vector<PostRecord> out;
  for (const auto& post : corpus.posts) {
    const bool take = split_name == "labeled" ? post.split != Split::wild
                                              : post.split == split_from_string(split_name);
    if (take) out.push_back(post);
  }
  if (out.empty()) throw DataError("no posts in query split '" + split_name + "'");
  return out;
}

IvfPqIndex load_index_for(const Corpus& corpus, const std::string& path, Modality modality) {
  IvfPqIndex index = IvfPqIndex::load(path);
  const int want = modality == Modality::image ? corpus.dim_image : corpus.dim_text;
  if (index.dim() != want) {
    throw DataError("index " + path + " has dimension " + std::to_string(index.dim()) +
                    ", corpus carries " + std::to_string(want));
  }
  const std::size_t wild_count = split_indices(corpus, Split::wild).size();
  if (index.size() != wild_count) {
    throw DataError("index " + path + " holds " + std::to_string(index.size()) +
                    " vectors, the corpus wild split holds " + std::to_string(wild_count));
  }
  return index;
}

json metrics_json(const MetricsReport& report) {
  json per = json::array();
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& m = report.per_class[c];
    per.push_back({{"class", c},
                   {"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1},
                   {"support", m.support}});
  }
  return {{"accuracy", report.accuracy},
          {"macro_precision", report.macro_precision},
          {"macro_recall", report.macro_recall},
          {"macro_f1", report.macro_f1},
          {"per_class", per}};
}

json weights_json(const FusionWeights& weights) {
  return {{"alpha", weights.alpha},
          {"i_mean", weights.i_mean},
          {"t_mean", weights.t_mean},
          {"M", weights.query_count},
          {"K", weights.rank_cutoff}};
}

// Options shared by every command that runs the retrieval pipeline
struct PipelineOpts {
  std::string corpus_path;
  std::string img_index_path;
  std::string txt_index_path;
  double alpha = -1.0;  // < 0 means "not overridden"
  std::string weights_path;
  std::string alpha_split = "labeled";
  int alpha_top_k = 5;
  int top_r = 1000;
  int nprobe = 8;
  bool adc_rescore = false;
  bool exact_alpha = false;

  void add_common(CLI::App* cmd, bool with_alpha) {
    cmd->add_option("--corpus", corpus_path, "corpus jsonl file")->required();
    cmd->add_option("--img-index", img_index_path, "image index file")->required();
    cmd->add_option("--txt-index", txt_index_path, "text index file")->required();
    cmd->add_option("--top-r", top_r, "per-modality candidate depth");
    cmd->add_option("--nprobe", nprobe, "coarse lists probed per search");
    if (with_alpha) {
      cmd->add_option("--alpha", alpha, "fusion weight override in [0,1]");
      cmd->add_option("--weights", weights_path, "weights file written by estimate-alpha");
      cmd->add_option("--alpha-split", alpha_split,
                      "query split for internal alpha estimation")
          ->check(CLI::IsMember({"train", "val", "test", "labeled", "wild"}));
      cmd->add_option("--alpha-top-k", alpha_top_k, "rank cutoff K for alpha estimation");
      cmd->add_flag("--exact-alpha", exact_alpha,
                    "estimate alpha with exhaustive search instead of the index");
      cmd->add_flag("--adc-rescore", adc_rescore,
                    "score final candidates with ADC instead of raw vectors");
    }
  }

  FusionWeights resolve_weights(const Corpus& corpus, const IvfPqIndex& img,
                                const IvfPqIndex& txt) const {
    if (alpha >= 0.0) {
      if (alpha > 1.0) throw ArgumentError("--alpha must lie in [0,1]");
      FusionWeights w;
      w.alpha = alpha;
      return w;
    }
    if (!weights_path.empty()) {
      std::ifstream in(weights_path);
      if (!in) throw DataError("cannot open weights file: " + weights_path);
      std::string line;
      if (!std::getline(in, line)) throw DataError("weights file is empty: " + weights_path);
      json parsed;
      try {
        parsed = json::parse(line);
      } catch (const json::exception& e) {
        throw ParseError("weights file " + weights_path + ": " + e.what(), 1);
      }
      FusionWeights w;
      try {
        w.alpha = parsed.at("alpha").get<double>();
        w.i_mean = parsed.at("i_mean").get<double>();
        w.t_mean = parsed.at("t_mean").get<double>();
        w.query_count = parsed.at("M").get<int>();
        w.rank_cutoff = parsed.at("K").get<int>();
      } catch (const json::exception& e) {
        throw SchemaError("weights file " + weights_path + ": " + e.what());
      }
      if (!(w.alpha >= 0.0 && w.alpha <= 1.0)) {
        throw DataError("weights file " + weights_path + ": alpha outside [0,1]");
      }
      return w;
    }
    const auto queries = collect_queries(corpus, alpha_split);
    if (exact_alpha) {
      const auto wild_img = split_matrix(corpus, Split::wild, Modality::image);
      const auto wild_txt = split_matrix(corpus, Split::wild, Modality::text);
      return estimate_alpha_exact(queries, wild_img, wild_txt, alpha_top_k);
    }
    return estimate_alpha(queries, img, txt, alpha_top_k, std::max(top_r, alpha_top_k), nprobe);
  }
};

// ---- synth ----------------------------------------------------------------

struct SynthOpts {
  SynthConfig config;
  std::string out_path;
  std::uint64_t seed = 0;
  bool normalize = false;
  bool sidecar = false;
};

void run_synth(const SynthOpts& opts) {
  Corpus corpus = generate_synthetic_corpus(opts.config, opts.seed);
  if (opts.normalize) corpus = normalize_vectors(std::move(corpus));
  save_corpus(corpus, opts.out_path, {.use_sidecar = opts.sidecar});
  const auto counts = corpus.split_counts();
  std::cerr << "synth: wrote " << corpus.posts.size() << " posts (train " << counts[0] << ", val "
            << counts[1] << ", test " << counts[2] << ", wild " << counts[3] << ") to "
            << opts.out_path << "\n";
}

// ---- ingest ---------------------------------------------------------------

struct IngestOpts {
  std::string in_path;
  std::string out_path;
  bool normalize = false;
  bool sidecar = false;
};

void run_ingest(const IngestOpts& opts) {
  Corpus corpus = load_corpus(opts.in_path);
  if (opts.normalize) corpus = normalize_vectors(std::move(corpus));
  save_corpus(corpus, opts.out_path, {.use_sidecar = opts.sidecar});
  const auto counts = corpus.split_counts();
  std::cerr << "ingest: " << corpus.posts.size() << " posts (train " << counts[0] << ", val "
            << counts[1] << ", test " << counts[2] << ", wild " << counts[3] << "), dims "
            << corpus.dim_image << "/" << corpus.dim_text << ", classes " << corpus.class_count
            << "\n";
}

// ---- build-index ----------------------------------------------------------

struct BuildIndexOpts {
  std::string corpus_path;
  std::string out_path;
  std::string modality = "image";
  IvfPqConfig config;
  std::uint64_t seed = 0;
};

void run_build_index(const BuildIndexOpts& opts) {
  const Corpus corpus = load_corpus(opts.corpus_path);
  const Modality modality = opts.modality == "image" ? Modality::image : Modality::text;
  const FloatMatrix vectors = split_matrix(corpus, Split::wild, modality);
  if (vectors.rows == 0) throw DataError("corpus has no wild posts to index");

  IvfPqIndex index = IvfPqIndex::train(vectors, opts.config, opts.seed);
  for (std::size_t i = 0; i < vectors.rows; ++i) {
    index.add(static_cast<std::int64_t>(i), vectors.row(i));
  }
  index.freeze();
  index.save(opts.out_path);
  std::cerr << "build-index: " << opts.modality << " index over " << vectors.rows
            << " wild posts -> " << opts.out_path << "\n";
}

// ---- estimate-alpha -------------------------------------------------------

struct EstimateAlphaOpts {
  PipelineOpts pipeline;
  std::string out_path = "-";
};

void run_estimate_alpha(const EstimateAlphaOpts& opts) {
  const Corpus corpus = load_corpus(opts.pipeline.corpus_path);
  const auto img = load_index_for(corpus, opts.pipeline.img_index_path, Modality::image);
  const auto txt = load_index_for(corpus, opts.pipeline.txt_index_path, Modality::text);

  const auto queries = collect_queries(corpus, opts.pipeline.alpha_split);
  FusionWeights weights;
  if (opts.pipeline.exact_alpha) {
    const auto wild_img = split_matrix(corpus, Split::wild, Modality::image);
    const auto wild_txt = split_matrix(corpus, Split::wild, Modality::text);
    weights = estimate_alpha_exact(queries, wild_img, wild_txt, opts.pipeline.alpha_top_k);
  } else {
    weights = estimate_alpha(queries, img, txt, opts.pipeline.alpha_top_k,
                             std::max(opts.pipeline.top_r, opts.pipeline.alpha_top_k),
                             opts.pipeline.nprobe);
  }

  OutputFile out(opts.out_path);
  out.stream() << weights_json(weights).dump() << "\n";
}

// ---- retrieve / consensus -------------------------------------------------

struct RetrieveOpts {
  PipelineOpts pipeline;
  std::string query_split = "labeled";
  int top_k = 5;
  int top_n = 5;  // consensus only
  std::string out_path = "-";
};

RetrievalParams retrieval_params(const PipelineOpts& pipeline, int top_k) {
  RetrievalParams params;
  params.top_r = pipeline.top_r;
  params.top_k = top_k;
  params.nprobe = pipeline.nprobe;
  params.exact_rescore = !pipeline.adc_rescore;
  return params;
}

void run_retrieve(const RetrieveOpts& opts, bool with_consensus) {
  const Corpus corpus = load_corpus(opts.pipeline.corpus_path);
  const auto img = load_index_for(corpus, opts.pipeline.img_index_path, Modality::image);
  const auto txt = load_index_for(corpus, opts.pipeline.txt_index_path, Modality::text);
  const WildView wild = WildView::from(corpus);
  const FusionWeights weights = opts.pipeline.resolve_weights(corpus, img, txt);
  const auto queries = collect_queries(corpus, opts.query_split);
  const RetrievalParams params = retrieval_params(opts.pipeline, opts.top_k);

  std::vector<RetrievalResult> results(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    results[i] = retrieve_similar_posts(queries[i], wild, img, txt, weights, params);
  });

  OutputFile out(opts.out_path);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (with_consensus) {
      const auto pool = build_comment_pool(wild, results[i]);
      const auto set = select_top_n(pool, opts.top_n);
      json comments = json::array();
      for (const auto& entry : set.entries) {
        comments.push_back({{"comment_id", entry.comment.comment_id},
                            {"text", entry.comment.text},
                            {"q", entry.score}});
      }
      out.stream() << json{{"query_id", queries[i].post_id}, {"consensus", comments}}.dump()
                   << "\n";
    } else {
      json hits = json::array();
      for (const auto& hit : results[i].hits) {
        hits.push_back({{"id", hit.post_id},
                        {"s_img", hit.s_img},
                        {"s_txt", hit.s_txt},
                        {"s_fused", hit.s_fused}});
      }
      out.stream() << json{{"query_id", queries[i].post_id},
                           {"hits", hits},
                           {"source", to_string(results[i].candidate_source)}}
                          .dump()
                   << "\n";
    }
  }
}

// ---- train / selftrain / eval ---------------------------------------------

struct TrainOpts {
  PipelineOpts pipeline;
  SelfTrainConfig train;
  std::string scheme = "early";
  int hidden = 16;
  int attn_hidden = 32;
  std::string metric = "macro-f1";
  std::string report_path = "-";
  std::string checkpoint_path;
  std::string attention_path;
  std::string logits_path;
};

struct Datasets {
  LabeledSet train;
  LabeledSet val;
  LabeledSet test;
  UnlabeledSet unlabeled;  // built from the train queries' retrievals
};

LabeledSet build_labeled(const Corpus& corpus, Split split, const WildView& wild,
                         const IvfPqIndex& img, const IvfPqIndex& txt,
                         const FusionWeights& weights, const RetrievalParams& params, int top_n,
                         std::vector<RetrievalResult>* keep_retrievals) {
  std::vector<PostRecord> posts;
  for (const auto& post : corpus.posts) {
    if (post.split == split) posts.push_back(post);
  }
  LabeledSet items(posts.size());
  std::vector<RetrievalResult> retrievals(posts.size());
  parallel_for(posts.size(), [&](std::size_t i) {
    retrievals[i] = retrieve_similar_posts(posts[i], wild, img, txt, weights, params);
    const auto pool = build_comment_pool(wild, retrievals[i]);
    items[i] = {posts[i], select_top_n(pool, top_n)};
  });
  if (keep_retrievals != nullptr) *keep_retrievals = std::move(retrievals);
  return items;
}

Datasets build_datasets(const Corpus& corpus, const WildView& wild, const IvfPqIndex& img,
                        const IvfPqIndex& txt, const FusionWeights& weights,
                        const RetrievalParams& params, int top_n) {
  Datasets data;
  std::vector<RetrievalResult> train_retrievals;
  data.train = build_labeled(corpus, Split::train, wild, img, txt, weights, params, top_n,
                             &train_retrievals);
  data.val = build_labeled(corpus, Split::val, wild, img, txt, weights, params, top_n, nullptr);
  data.test = build_labeled(corpus, Split::test, wild, img, txt, weights, params, top_n, nullptr);

  // every retrieved wild post inherits the consensus set of its query
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    for (const auto& hit : train_retrievals[i].hits) {
      const PostRecord* post = wild.find(hit.post_id);
      data.unlabeled.push_back(
          {*post, data.train[i].comments, data.train[i].post.post_id, std::nullopt});
    }
  }
  return data;
}

void dump_attention(const FusionClassifier& model, const LabeledSet& items,
                    const std::string& path) {
  OutputFile out(path);
  for (const auto& item : items) {
    const auto result = forward_classifier(model, make_model_input(item.post, item.comments));
    json line{{"post_id", item.post.post_id}, {"betas", result.betas}};
    if (!result.betas_text.empty()) line["betas_text"] = result.betas_text;
    out.stream() << line.dump() << "\n";
  }
}

void dump_logits(const FusionClassifier& model, const LabeledSet& items,
                 const std::string& path) {
  OutputFile out(path);
  for (const auto& item : items) {
    const auto result = forward_classifier(model, make_model_input(item.post, item.comments));
    out.stream() << json{{"post_id", item.post.post_id}, {"logits", result.logits}}.dump()
                 << "\n";
  }
}

void run_training(const TrainOpts& opts) {
  const Corpus corpus = load_corpus(opts.pipeline.corpus_path);
  const auto img = load_index_for(corpus, opts.pipeline.img_index_path, Modality::image);
  const auto txt = load_index_for(corpus, opts.pipeline.txt_index_path, Modality::text);
  const WildView wild = WildView::from(corpus);
  const FusionWeights weights = opts.pipeline.resolve_weights(corpus, img, txt);
  std::cerr << "training: alpha " << weights.alpha << "\n";

  SelfTrainConfig config = opts.train;
  config.validation_metric = validation_metric_from_string(opts.metric);
  const RetrievalParams params = retrieval_params(opts.pipeline, config.retrieved_per_query);
  const Datasets data =
      build_datasets(corpus, wild, img, txt, weights, params, config.consensus_size);
  std::cerr << "training: " << data.train.size() << " train / " << data.val.size() << " val / "
            << data.test.size() << " test items, " << data.unlabeled.size()
            << " retrieved unlabeled\n";

  ClassifierConfig arch;
  arch.scheme = scheme_from_string(opts.scheme);
  arch.dim_image = corpus.dim_image;
  arch.dim_text = corpus.dim_text;
  arch.hidden = opts.hidden;
  arch.attn_hidden = opts.attn_hidden;
  arch.classes = corpus.class_count;

  const SelfTrainResult result =
      self_train_loop(data.train, data.val, data.unlabeled, arch, config);
  const MetricsReport test_metrics = evaluate_model(result.model, data.test);

  OutputFile report(opts.report_path);
  for (const auto& phase : result.phases) {
    for (const auto& epoch : phase.history) {
      report.stream() << json{{"iteration", phase.iteration},
                              {"phase", to_string(phase.role)},
                              {"epoch", epoch.epoch},
                              {"train_loss", epoch.train_loss},
                              {"val_metric", epoch.val_metric}}
                             .dump()
                      << "\n";
    }
  }
  report.stream() << json{{"iterations", config.iterations},
                          {"best_val", result.best_val},
                          {"test_metrics", metrics_json(test_metrics)}}
                         .dump()
                  << "\n";

  if (!opts.checkpoint_path.empty()) result.model.save(opts.checkpoint_path);
  if (!opts.attention_path.empty()) dump_attention(result.model, data.test, opts.attention_path);
  if (!opts.logits_path.empty()) dump_logits(result.model, data.test, opts.logits_path);
}

struct EvalOpts {
  PipelineOpts pipeline;
  std::string checkpoint_path;
  std::string split = "test";
  int retrieved_per_query = 5;
  int consensus_size = 5;
  std::string out_path = "-";
  std::string attention_path;
  std::string logits_path;
};

void run_eval(const EvalOpts& opts) {
  const Corpus corpus = load_corpus(opts.pipeline.corpus_path);
  const auto img = load_index_for(corpus, opts.pipeline.img_index_path, Modality::image);
  const auto txt = load_index_for(corpus, opts.pipeline.txt_index_path, Modality::text);
  const WildView wild = WildView::from(corpus);
  const FusionWeights weights = opts.pipeline.resolve_weights(corpus, img, txt);

  const FusionClassifier model = FusionClassifier::load(opts.checkpoint_path);
  if (model.config().dim_image != corpus.dim_image ||
      model.config().dim_text != corpus.dim_text ||
      model.config().classes != corpus.class_count) {
    throw DataError("checkpoint dimensions do not match the corpus");
  }

  const RetrievalParams params = retrieval_params(opts.pipeline, opts.retrieved_per_query);
  const LabeledSet items =
      build_labeled(corpus, split_from_string(opts.split), wild, img, txt, weights, params,
                    opts.consensus_size, nullptr);

  const MetricsReport metrics = evaluate_model(model, items);
  OutputFile out(opts.out_path);
  out.stream() << metrics_json(metrics).dump() << "\n";

  if (!opts.attention_path.empty()) dump_attention(model, items, opts.attention_path);
  if (!opts.logits_path.empty()) dump_logits(model, items, opts.logits_path);
}

// ---- gradcheck --------------------------------------------------------------

struct GradCheckOpts {
  std::string scheme = "both";
  int dim_image = 12;
  int dim_text = 10;
  int hidden = 16;
  int attn_hidden = 32;
  int classes = 3;
  int comments = 5;
  int batch = 4;
  // near the cancellation/truncation optimum for O(1) double-precision losses;
  // 1e-5 pushes roundoff noise above tol on small attention gradients
  double eps = 3e-4;
  double tol = 1e-4;
  std::uint64_t seed = 0;
  std::string out_path = "-";
};

double gradcheck_scheme(const GradCheckOpts& opts, FusionScheme scheme) {
  ClassifierConfig config;
  config.scheme = scheme;
  config.dim_image = opts.dim_image;
  config.dim_text = opts.dim_text;
  config.hidden = opts.hidden;
  config.attn_hidden = opts.attn_hidden;
  config.classes = opts.classes;
  const auto model = FusionClassifier::init(config, opts.seed);

  std::mt19937_64 rng(opts.seed + 1);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const auto draw = [&](int n) {
    std::vector<double> v(n);
    for (auto& x : v) x = unit(rng);
    return v;
  };

  std::vector<TrainExample> batch(opts.batch);
  for (int i = 0; i < opts.batch; ++i) {
    auto& example = batch[i];
    example.input.image = draw(opts.dim_image);
    example.input.text = draw(opts.dim_text);
    for (int n = 0; n < opts.comments; ++n) example.input.comments.push_back(draw(opts.dim_text));
    if (i % 2 == 0) {
      example.label = i % opts.classes;
    } else {
      example.soft = SoftLabel{softmax(draw(opts.classes))};
    }
  }
  return grad_check(model, batch, opts.eps);
}

void run_gradcheck(const GradCheckOpts& opts) {
  std::vector<FusionScheme> schemes;
  if (opts.scheme == "both" || opts.scheme == "early") schemes.push_back(FusionScheme::early);
  if (opts.scheme == "both" || opts.scheme == "late") schemes.push_back(FusionScheme::late);

  OutputFile out(opts.out_path);
  double worst = 0.0;
  for (const auto scheme : schemes) {
    const double err = gradcheck_scheme(opts, scheme);
    worst = std::max(worst, err);
    out.stream() << json{{"scheme", to_string(scheme)}, {"max_rel_error", err}}.dump() << "\n";
  }
  if (worst > opts.tol) {
    throw StateError("gradient check failed: max relative error " + std::to_string(worst) +
                     " exceeds " + std::to_string(opts.tol));
  }
}

void configure_training_command(CLI::App* cmd, const std::shared_ptr<TrainOpts>& opts,
                                bool selftrain) {
  opts->pipeline.add_common(cmd, true);
  if (selftrain) {
    cmd->add_option("--iterations", opts->train.iterations, "teacher-student iterations");
    cmd->add_option("--dropout-rate", opts->train.dropout_rate,
                    "per-comment dropout probability for student inputs");
  }
  cmd->add_option("--epochs", opts->train.epochs_per_phase, "epochs per training phase");
  cmd->add_option("--retrieved-per-query", opts->train.retrieved_per_query,
                  "similar posts retrieved per query (K)");
  cmd->add_option("--consensus-size", opts->train.consensus_size,
                  "consensus comments per query (N)");
  cmd->add_option("--batch-size", opts->train.batch_size, "labeled examples per step");
  cmd->add_option("--lr", opts->train.optimizer.lr, "AdamW learning rate");
  cmd->add_option("--weight-decay", opts->train.optimizer.weight_decay, "AdamW weight decay");
  cmd->add_option("--seed", opts->train.seed, "seed for init, shuffling, dropout");
  cmd->add_option("--scheme", opts->scheme, "fusion scheme")
      ->check(CLI::IsMember({"early", "late"}));
  cmd->add_option("--hidden", opts->hidden, "base hidden width H");
  cmd->add_option("--attn-hidden", opts->attn_hidden, "attention scorer width A");
  cmd->add_option("--validation-metric", opts->metric, "checkpoint selection metric")
      ->check(CLI::IsMember({"macro-f1", "accuracy"}));
  cmd->add_option("--report", opts->report_path, "training report jsonl ('-' = stdout)");
  cmd->add_option("--checkpoint", opts->checkpoint_path, "write the final model here");
  cmd->add_option("--attention-dump", opts->attention_path,
                  "write test-split attention weights here");
  cmd->add_option("--logits-dump", opts->logits_path, "write test-split logits here");
}

// Config files are expanded by hand before CLI11 sees the args: CLI11 only
// reads a config attached to the app parse() runs on, so a per-subcommand
// set_config never fires. Keys the command line already sets are skipped,
// which keeps the precedence defaults < config file < flags.
std::vector<std::string> expand_config_args(std::vector<std::string> args) {
  std::size_t pos = args.size();
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& arg = args[i];
    if (arg == "--config") {
      if (i + 1 >= args.size()) throw ArgumentError("--config needs a file path");
      pos = i;
      path = args[i + 1];
      args.erase(args.begin() + long(i), args.begin() + long(i) + 2);
      break;
    }
    if (arg.rfind("--config=", 0) == 0) {
      pos = i;
      path = arg.substr(9);
      args.erase(args.begin() + long(i));
      break;
    }
  }
  if (path.empty()) {
    if (pos == args.size()) return args;
    throw ArgumentError("--config needs a file path");
  }
  for (const auto& arg : args) {
    if (arg == "--config" || arg.rfind("--config=", 0) == 0) {
      throw ArgumentError("--config may be given only once");
    }
  }

  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open config file: " + path);

  const auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };
  const auto set_on_command_line = [&args](const std::string& key) {
    const std::string plain = "--" + key;
    for (const auto& arg : args) {
      if (arg == plain || arg.rfind(plain + "=", 0) == 0) return true;
    }
    return false;
  };

  std::vector<std::string> inject;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string key = eq == std::string::npos ? std::string() : trim(line.substr(0, eq));
    if (key.empty()) {
      throw ArgumentError("config file " + path + " line " + std::to_string(line_no) +
                          ": expected key = value");
    }
    if (set_on_command_line(key)) continue;
    inject.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  args.insert(args.begin() + long(pos), inject.begin(), inject.end());
  return args;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"comment-aware cross-modal retrieval and self-training over precomputed "
               "embeddings"};
  app.require_subcommand(1);

  const auto add_config = [](CLI::App* cmd) {
    // consumed by expand_config_args; declared here so help lists it
    cmd->add_option("--config")
        ->description("read options from a key = value file")
        ->type_name("FILE");
  };

  // synth
  auto synth_opts = std::make_shared<SynthOpts>();
  {
    auto* cmd = app.add_subcommand("synth", "generate a synthetic labeled corpus");
    add_config(cmd);
    cmd->add_option("--out", synth_opts->out_path, "corpus jsonl destination")->required();
    cmd->add_option("--classes", synth_opts->config.classes, "number of classes");
    cmd->add_option("--train-per-class", synth_opts->config.train_per_class, "");
    cmd->add_option("--val-per-class", synth_opts->config.val_per_class, "");
    cmd->add_option("--test-per-class", synth_opts->config.test_per_class, "");
    cmd->add_option("--wild-per-class", synth_opts->config.wild_per_class, "");
    cmd->add_option("--dim-image", synth_opts->config.dim_image, "");
    cmd->add_option("--dim-text", synth_opts->config.dim_text, "");
    cmd->add_option("--spread", synth_opts->config.spread, "noise stddev around class centers");
    cmd->add_option("--comment-signal", synth_opts->config.comment_signal,
                    "class-direction weight in comment vectors");
    cmd->add_option("--min-comments", synth_opts->config.min_comments, "");
    cmd->add_option("--max-comments", synth_opts->config.max_comments, "");
    cmd->add_option("--seed", synth_opts->seed, "");
    cmd->add_flag("--normalize", synth_opts->normalize, "unit-normalize all vectors");
    cmd->add_flag("--sidecar", synth_opts->sidecar, "store vectors in binary sidecars");
    cmd->callback([synth_opts]() { run_synth(*synth_opts); });
  }

  // ingest
  auto ingest_opts = std::make_shared<IngestOpts>();
  {
    auto* cmd = app.add_subcommand("ingest", "validate and rewrite a corpus");
    add_config(cmd);
    cmd->add_option("--in", ingest_opts->in_path, "corpus jsonl source")->required();
    cmd->add_option("--out", ingest_opts->out_path, "corpus jsonl destination")->required();
    cmd->add_flag("--normalize", ingest_opts->normalize, "unit-normalize all vectors");
    cmd->add_flag("--sidecar", ingest_opts->sidecar, "store vectors in binary sidecars");
    cmd->callback([ingest_opts]() { run_ingest(*ingest_opts); });
  }

  // build-index
  auto build_opts = std::make_shared<BuildIndexOpts>();
  {
    auto* cmd = app.add_subcommand("build-index", "train and fill an index over the wild split");
    add_config(cmd);
    cmd->add_option("--corpus", build_opts->corpus_path, "corpus jsonl file")->required();
    cmd->add_option("--out", build_opts->out_path, "index destination")->required();
    cmd->add_option("--modality", build_opts->modality, "which vectors to index")
        ->required()
        ->check(CLI::IsMember({"image", "text"}));
    cmd->add_option("--nlist", build_opts->config.nlist, "coarse cluster count");
    cmd->add_option("--m", build_opts->config.m, "subquantizer count");
    cmd->add_option("--ks", build_opts->config.ks, "codes per subquantizer");
    cmd->add_option("--kmeans-iters", build_opts->config.kmeans_iters, "");
    cmd->add_option("--seed", build_opts->seed, "");
    cmd->callback([build_opts]() { run_build_index(*build_opts); });
  }

  // estimate-alpha
  auto alpha_opts = std::make_shared<EstimateAlphaOpts>();
  {
    auto* cmd = app.add_subcommand("estimate-alpha",
                                   "estimate the fusion weight from retrieval statistics");
    add_config(cmd);
    alpha_opts->pipeline.add_common(cmd, false);
    cmd->add_option("--query-split", alpha_opts->pipeline.alpha_split, "query posts")
        ->check(CLI::IsMember({"train", "val", "test", "labeled", "wild"}));
    cmd->add_option("--top-k", alpha_opts->pipeline.alpha_top_k, "rank cutoff K");
    cmd->add_flag("--exact", alpha_opts->pipeline.exact_alpha,
                  "exhaustive search instead of the index");
    cmd->add_option("--out", alpha_opts->out_path, "weights destination ('-' = stdout)");
    cmd->callback([alpha_opts]() { run_estimate_alpha(*alpha_opts); });
  }

  // retrieve
  auto retrieve_opts = std::make_shared<RetrieveOpts>();
  {
    auto* cmd = app.add_subcommand("retrieve", "rank similar wild posts per query");
    add_config(cmd);
    retrieve_opts->pipeline.add_common(cmd, true);
    cmd->add_option("--query-split", retrieve_opts->query_split, "query posts")
        ->check(CLI::IsMember({"train", "val", "test", "labeled", "wild"}));
    cmd->add_option("--top-k", retrieve_opts->top_k, "similar posts per query (K)");
    cmd->add_option("--out", retrieve_opts->out_path, "results destination ('-' = stdout)");
    cmd->callback([retrieve_opts]() { run_retrieve(*retrieve_opts, false); });
  }

  // consensus
  auto consensus_opts = std::make_shared<RetrieveOpts>();
  {
    auto* cmd = app.add_subcommand("consensus", "select consensus comments per query");
    add_config(cmd);
    consensus_opts->pipeline.add_common(cmd, true);
    cmd->add_option("--query-split", consensus_opts->query_split, "query posts")
        ->check(CLI::IsMember({"train", "val", "test", "labeled", "wild"}));
    cmd->add_option("--top-k", consensus_opts->top_k, "similar posts per query (K)");
    cmd->add_option("--top-n", consensus_opts->top_n, "consensus comments per query (N)");
    cmd->add_option("--out", consensus_opts->out_path, "results destination ('-' = stdout)");
    cmd->callback([consensus_opts]() { run_retrieve(*consensus_opts, true); });
  }

  // train
  auto train_opts = std::make_shared<TrainOpts>();
  {
    auto* cmd = app.add_subcommand("train", "train the base classifier on labeled data only");
    add_config(cmd);
    configure_training_command(cmd, train_opts, false);
    cmd->callback([train_opts]() {
      train_opts->train.iterations = 0;
      run_training(*train_opts);
    });
  }

  // selftrain
  auto selftrain_opts = std::make_shared<TrainOpts>();
  {
    auto* cmd = app.add_subcommand("selftrain", "teacher-student self-training");
    add_config(cmd);
    configure_training_command(cmd, selftrain_opts, true);
    cmd->callback([selftrain_opts]() { run_training(*selftrain_opts); });
  }

  // eval
  auto eval_opts = std::make_shared<EvalOpts>();
  {
    auto* cmd = app.add_subcommand("eval", "evaluate a checkpoint on a labeled split");
    add_config(cmd);
    eval_opts->pipeline.add_common(cmd, true);
    cmd->add_option("--checkpoint", eval_opts->checkpoint_path, "model to evaluate")->required();
    cmd->add_option("--split", eval_opts->split, "labeled split to score")
        ->check(CLI::IsMember({"train", "val", "test"}));
    cmd->add_option("--retrieved-per-query", eval_opts->retrieved_per_query,
                    "similar posts retrieved per query (K)");
    cmd->add_option("--consensus-size", eval_opts->consensus_size,
                    "consensus comments per query (N)");
    cmd->add_option("--out", eval_opts->out_path, "metrics destination ('-' = stdout)");
    cmd->add_option("--attention-dump", eval_opts->attention_path, "");
    cmd->add_option("--logits-dump", eval_opts->logits_path, "");
    cmd->callback([eval_opts]() { run_eval(*eval_opts); });
  }

  // gradcheck
  auto gradcheck_opts = std::make_shared<GradCheckOpts>();
  {
    auto* cmd = app.add_subcommand("gradcheck",
                                   "compare backprop gradients against finite differences");
    add_config(cmd);
    cmd->add_option("--scheme", gradcheck_opts->scheme, "")
        ->check(CLI::IsMember({"both", "early", "late"}));
    cmd->add_option("--dim-image", gradcheck_opts->dim_image, "");
    cmd->add_option("--dim-text", gradcheck_opts->dim_text, "");
    cmd->add_option("--hidden", gradcheck_opts->hidden, "");
    cmd->add_option("--attn-hidden", gradcheck_opts->attn_hidden, "");
    cmd->add_option("--classes", gradcheck_opts->classes, "");
    cmd->add_option("--comments", gradcheck_opts->comments, "");
    cmd->add_option("--batch", gradcheck_opts->batch, "");
    cmd->add_option("--eps", gradcheck_opts->eps, "finite-difference half-width");
    cmd->add_option("--tol", gradcheck_opts->tol, "maximum acceptable relative error");
    cmd->add_option("--seed", gradcheck_opts->seed, "");
    cmd->add_option("--out", gradcheck_opts->out_path, "");
    cmd->callback([gradcheck_opts]() { run_gradcheck(*gradcheck_opts); });
  }

  try {
    const std::vector<std::string> expanded = expand_config_args(args);
    std::vector<const char*> argv;
    argv.reserve(expanded.size() + 1);
    argv.push_back("xmc");
    for (const auto& arg : expanded) argv.push_back(arg.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace xmc
