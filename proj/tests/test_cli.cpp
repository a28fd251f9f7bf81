#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmc/cli.hpp"
#include "xmc/consensus.hpp"
#include "xmc/corpus.hpp"
#include "xmc/error.hpp"
#include "xmc/vecindex.hpp"
#include "xmc/xsearch.hpp"

using namespace xmc;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = 0;
  std::string out;
  std::string err;
};

// run a CLI invocation with both streams captured so test output stays clean
RunResult run(const std::vector<std::string>& args) {
  std::ostringstream out_sink, err_sink;
  std::streambuf* old_out = std::cout.rdbuf(out_sink.rdbuf());
  std::streambuf* old_err = std::cerr.rdbuf(err_sink.rdbuf());
  RunResult result;
  try {
    result.code = run_command(args);
  } catch (...) {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    throw;
  }
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  result.out = out_sink.str();
  result.err = err_sink.str();
  return result;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "cannot open ", path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<json> json_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "cannot open ", path.string());
  std::vector<json> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(json::parse(line));
  }
  return lines;
}

void spit(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// one shared corpus plus indexes, synthesized through the CLI itself
struct Workspace {
  fs::path dir;
  std::string corpus, img, txt;

  Workspace() {
    dir = fs::temp_directory_path() / "xmc-cli-tests";
    fs::remove_all(dir);
    fs::create_directories(dir);
    corpus = (dir / "corpus.jsonl").string();
    img = (dir / "img.idx").string();
    txt = (dir / "txt.idx").string();
    REQUIRE(run({"synth", "--out", corpus, "--classes", "2", "--train-per-class", "6",
                 "--val-per-class", "4", "--test-per-class", "4", "--wild-per-class", "30",
                 "--dim-image", "8", "--dim-text", "6", "--normalize", "--seed", "3"})
                .code == 0);
    REQUIRE(run({"build-index", "--corpus", corpus, "--out", img, "--modality", "image",
                 "--nlist", "8", "--m", "2", "--ks", "16", "--seed", "1"})
                .code == 0);
    REQUIRE(run({"build-index", "--corpus", corpus, "--out", txt, "--modality", "text",
                 "--nlist", "8", "--m", "2", "--ks", "16", "--seed", "1"})
                .code == 0);
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }
};

Workspace& ws() {
  static Workspace instance;
  return instance;
}

}  // namespace

TEST_CASE("cli: help and usage errors") {
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"synth", "--help"}).code == 0);
  CHECK(run({"selftrain", "--help"}).code == 0);
  CHECK(run({}).code == 1);                // a subcommand is required
  CHECK(run({"frobnicate"}).code == 1);    // unknown subcommand
  CHECK(run({"retrieve"}).code == 1);      // missing required options
  CHECK(run({"build-index", "--corpus", "x", "--out", "y", "--modality", "audio"}).code == 1);

  const auto help = run({"--help"});
  CHECK(help.out.find("retrieve") != std::string::npos);
  CHECK(help.out.find("selftrain") != std::string::npos);
}

TEST_CASE("cli: synth output shape and validation") {
  const Corpus corpus = load_corpus(ws().corpus);
  CHECK(corpus.class_count == 2);
  CHECK(corpus.dim_image == 8);
  CHECK(corpus.dim_text == 6);
  const auto counts = corpus.split_counts();
  CHECK(counts[0] == 12);
  CHECK(counts[1] == 8);
  CHECK(counts[2] == 8);
  CHECK(counts[3] == 60);

  CHECK(run({"synth", "--out", ws().path("bad.jsonl"), "--classes", "1"}).code == 1);
}

TEST_CASE("cli: ingest round trips, sidecars included") {
  const std::string copy = ws().path("copy.jsonl");
  CHECK(run({"ingest", "--in", ws().corpus, "--out", copy}).code == 0);
  CHECK(load_corpus(copy) == load_corpus(ws().corpus));

  const std::string side = ws().path("side.jsonl");
  CHECK(run({"ingest", "--in", ws().corpus, "--out", side, "--sidecar"}).code == 0);
  CHECK(fs::exists(ws().dir / "side.img.xmvec"));
  CHECK(fs::exists(ws().dir / "side.txt.xmvec"));
  CHECK(load_corpus(side) == load_corpus(ws().corpus));

  CHECK(run({"ingest", "--in", ws().path("nope.jsonl"), "--out", copy}).code == 2);

  // corrupt record line: valid header, malformed second line
  std::ifstream in(ws().corpus);
  std::string header;
  std::getline(in, header);
  const std::string corrupt = ws().path("corrupt.jsonl");
  spit(corrupt, header + "\n{broken\n");
  CHECK(run({"ingest", "--in", corrupt, "--out", copy}).code == 2);
}

TEST_CASE("cli: build-index writes loadable indexes and validates input") {
  const IvfPqIndex img = IvfPqIndex::load(ws().img);
  CHECK(img.dim() == 8);
  CHECK(img.size() == 60);
  const IvfPqIndex txt = IvfPqIndex::load(ws().txt);
  CHECK(txt.dim() == 6);
  CHECK(txt.size() == 60);

  // m does not divide the image dimension
  CHECK(run({"build-index", "--corpus", ws().corpus, "--out", ws().path("x.idx"), "--modality",
             "image", "--nlist", "4", "--m", "5", "--ks", "16"})
            .code == 1);
  CHECK(run({"build-index", "--corpus", ws().path("nope.jsonl"), "--out", ws().path("x.idx"),
             "--modality", "image"})
            .code == 2);

  // index/corpus dimension mismatch is caught before any search
  CHECK(run({"retrieve", "--corpus", ws().corpus, "--img-index", ws().txt, "--txt-index",
             ws().txt, "--out", ws().path("r.jsonl")})
            .code == 2);
}

TEST_CASE("cli: estimate-alpha matches the library and feeds retrieve") {
  const std::string wexact = ws().path("weights_exact.json");
  REQUIRE(run({"estimate-alpha", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
               ws().txt, "--exact", "--out", wexact})
              .code == 0);
  const auto exact = json_lines(wexact);
  REQUIRE(exact.size() == 1);
  const double alpha_exact = exact[0].at("alpha").get<double>();
  CHECK(alpha_exact >= 0.0);
  CHECK(alpha_exact <= 1.0);
  CHECK(exact[0].at("M").get<int>() == 28);  // train + val + test queries
  CHECK(exact[0].at("K").get<int>() == 5);

  // recompute with the library over the same query set
  const Corpus corpus = load_corpus(ws().corpus);
  std::vector<PostRecord> queries;
  for (const auto& post : corpus.posts) {
    if (post.split != Split::wild) queries.push_back(post);
  }
  const auto wild_img = split_matrix(corpus, Split::wild, Modality::image);
  const auto wild_txt = split_matrix(corpus, Split::wild, Modality::text);
  const FusionWeights want = estimate_alpha_exact(queries, wild_img, wild_txt, 5);
  CHECK(alpha_exact == doctest::Approx(want.alpha).epsilon(1e-12));

  const std::string wann = ws().path("weights_ann.json");
  REQUIRE(run({"estimate-alpha", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
               ws().txt, "--out", wann})
              .code == 0);
  const double alpha_ann = json_lines(wann)[0].at("alpha").get<double>();
  CHECK(alpha_ann >= 0.0);
  CHECK(alpha_ann <= 1.0);
  CHECK(std::abs(alpha_ann - alpha_exact) < 0.2);

  // the written weights file is accepted downstream
  CHECK(run({"retrieve", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
             ws().txt, "--weights", wexact, "--query-split", "val", "--out",
             ws().path("rw.jsonl")})
            .code == 0);

  // malformed weights files
  const std::string wbad = ws().path("weights_bad.json");
  spit(wbad, "{\"alpha\":1.5,\"i_mean\":1,\"t_mean\":1,\"M\":1,\"K\":1}\n");
  CHECK(run({"retrieve", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
             ws().txt, "--weights", wbad, "--out", ws().path("r.jsonl")})
            .code == 2);
  spit(wbad, "not json\n");
  CHECK(run({"retrieve", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
             ws().txt, "--weights", wbad, "--out", ws().path("r.jsonl")})
            .code == 2);
  spit(wbad, "{\"alpha\":0.5}\n");
  CHECK(run({"retrieve", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
             ws().txt, "--weights", wbad, "--out", ws().path("r.jsonl")})
            .code == 2);

  CHECK(run({"retrieve", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
             ws().txt, "--alpha", "1.5", "--out", ws().path("r.jsonl")})
            .code == 1);
}

TEST_CASE("cli: retrieve matches the library and thread count does not matter") {
  const std::string out_a = ws().path("retrieve_a.jsonl");
  REQUIRE(run({"retrieve", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
               ws().txt, "--alpha", "0.6", "--query-split", "val", "--top-k", "3", "--out",
               out_a})
              .code == 0);

  const Corpus corpus = load_corpus(ws().corpus);
  const IvfPqIndex img = IvfPqIndex::load(ws().img);
  const IvfPqIndex txt = IvfPqIndex::load(ws().txt);
  const WildView wild = WildView::from(corpus);
  FusionWeights weights;
  weights.alpha = 0.6;
  RetrievalParams params;
  params.top_r = 1000;
  params.top_k = 3;
  params.nprobe = 8;
  params.exact_rescore = true;

  std::vector<PostRecord> queries;
  for (const auto& post : corpus.posts) {
    if (post.split == Split::val) queries.push_back(post);
  }

  const auto lines = json_lines(out_a);
  REQUIRE(lines.size() == queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    CHECK(lines[i].at("query_id").get<std::string>() == queries[i].post_id);
    const auto want = retrieve_similar_posts(queries[i], wild, img, txt, weights, params);
    const auto& hits = lines[i].at("hits");
    REQUIRE(hits.size() == want.hits.size());
    for (std::size_t h = 0; h < want.hits.size(); ++h) {
      CHECK(hits[h].at("id").get<std::string>() == want.hits[h].post_id);
      CHECK(hits[h].at("s_fused").get<double>() ==
            doctest::Approx(want.hits[h].s_fused).epsilon(1e-12));
      CHECK(hits[h].at("s_img").get<double>() ==
            doctest::Approx(want.hits[h].s_img).epsilon(1e-12));
    }
    CHECK(lines[i].at("source").get<std::string>() == to_string(want.candidate_source));
  }

  // forcing one worker thread must not change a byte
  const std::string out_b = ws().path("retrieve_b.jsonl");
  ::setenv("XMC_THREADS", "1", 1);
  const int code = run({"retrieve", "--corpus", ws().corpus, "--img-index", ws().img,
                        "--txt-index", ws().txt, "--alpha", "0.6", "--query-split", "val",
                        "--top-k", "3", "--out", out_b})
                       .code;
  ::unsetenv("XMC_THREADS");
  REQUIRE(code == 0);
  CHECK(slurp(out_a) == slurp(out_b));
}

TEST_CASE("cli: consensus output matches the library pipeline") {
  const std::string out = ws().path("consensus.jsonl");
  REQUIRE(run({"consensus", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index",
               ws().txt, "--alpha", "0.6", "--query-split", "test", "--top-k", "3", "--top-n",
               "2", "--out", out})
              .code == 0);

  const Corpus corpus = load_corpus(ws().corpus);
  const IvfPqIndex img = IvfPqIndex::load(ws().img);
  const IvfPqIndex txt = IvfPqIndex::load(ws().txt);
  const WildView wild = WildView::from(corpus);
  FusionWeights weights;
  weights.alpha = 0.6;
  RetrievalParams params;
  params.top_k = 3;

  std::vector<PostRecord> queries;
  for (const auto& post : corpus.posts) {
    if (post.split == Split::test) queries.push_back(post);
  }

  const auto lines = json_lines(out);
  REQUIRE(lines.size() == queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto retrieval = retrieve_similar_posts(queries[i], wild, img, txt, weights, params);
    const auto want = select_top_n(build_comment_pool(wild, retrieval), 2);
    const auto& got = lines[i].at("consensus");
    REQUIRE(got.size() == want.entries.size());
    for (std::size_t c = 0; c < want.entries.size(); ++c) {
      CHECK(got[c].at("comment_id").get<std::string>() == want.entries[c].comment.comment_id);
      CHECK(got[c].at("q").get<double>() == doctest::Approx(want.entries[c].score).epsilon(1e-12));
    }
  }
}

TEST_CASE("cli: config files supply options, flags override, unknown keys fail") {
  const std::string cfg = ws().path("synth.cfg");
  spit(cfg,
       "classes=3\n"
       "train-per-class=4\n"
       "val-per-class=2\n"
       "test-per-class=2\n"
       "wild-per-class=6\n"
       "dim-image=6\n"
       "dim-text=4\n"
       "seed=9\n"
       "normalize=true\n");

  const std::string from_cfg = ws().path("from_cfg.jsonl");
  REQUIRE(run({"synth", "--config", cfg, "--out", from_cfg}).code == 0);
  const Corpus a = load_corpus(from_cfg);
  CHECK(a.class_count == 3);
  CHECK(a.dim_image == 6);
  CHECK(a.dim_text == 4);
  CHECK(a.split_counts() == std::array<std::size_t, 4>{12, 6, 6, 18});

  // command line wins over the config file
  const std::string overridden = ws().path("overridden.jsonl");
  REQUIRE(run({"synth", "--config", cfg, "--classes", "2", "--out", overridden}).code == 0);
  CHECK(load_corpus(overridden).class_count == 2);

  const std::string bad_cfg = ws().path("bad.cfg");
  spit(bad_cfg, "classes=2\nbogus-key=1\n");
  CHECK(run({"synth", "--config", bad_cfg, "--out", ws().path("x.jsonl")}).code == 1);
  CHECK(run({"synth", "--config", ws().path("missing.cfg"), "--out", ws().path("x.jsonl")}).code ==
        1);
}

TEST_CASE("cli: gradcheck validates both schemes") {
  const std::string out = ws().path("gradcheck.jsonl");
  REQUIRE(run({"gradcheck", "--dim-image", "6", "--dim-text", "5", "--hidden", "6",
               "--attn-hidden", "4", "--classes", "3", "--comments", "3", "--batch", "2",
               "--out", out})
              .code == 0);
  const auto lines = json_lines(out);
  REQUIRE(lines.size() == 2);
  CHECK(lines[0].at("scheme").get<std::string>() == "early");
  CHECK(lines[1].at("scheme").get<std::string>() == "late");
  for (const auto& line : lines) {
    CHECK(line.at("max_rel_error").get<double>() < 1e-4);
  }

  const std::string single = ws().path("gradcheck_one.jsonl");
  REQUIRE(run({"gradcheck", "--scheme", "late", "--dim-image", "6", "--dim-text", "5", "--hidden",
               "6", "--attn-hidden", "4", "--comments", "3", "--batch", "2", "--out", single})
              .code == 0);
  CHECK(json_lines(single).size() == 1);

  // an impossible tolerance must surface as a state error
  CHECK(run({"gradcheck", "--dim-image", "6", "--dim-text", "5", "--hidden", "6", "--attn-hidden",
             "4", "--comments", "3", "--batch", "2", "--tol", "1e-18", "--out", out})
            .code == 3);
}

TEST_CASE("cli: train, selftrain and eval fit together deterministically") {
  const std::vector<std::string> common = {
      "--corpus",      ws().corpus, "--img-index",  ws().img,
      "--txt-index",   ws().txt,    "--alpha",      "0.5",
      "--epochs",      "2",         "--batch-size", "4",
      "--hidden",      "6",         "--attn-hidden", "4",
      "--scheme",      "early",     "--seed",       "5",
      "--lr",          "0.01",      "--retrieved-per-query", "3",
      "--consensus-size", "3"};

  const auto train_cmd = [&](const std::string& report, const std::string& checkpoint,
                             const std::string& logits) {
    std::vector<std::string> args = {"train"};
    args.insert(args.end(), common.begin(), common.end());
    args.insert(args.end(), {"--report", report, "--checkpoint", checkpoint, "--logits-dump",
                             logits});
    return run(args).code;
  };

  const std::string rep1 = ws().path("rep1.jsonl"), ck1 = ws().path("ck1.bin"),
                    lg1 = ws().path("lg1.jsonl");
  REQUIRE(train_cmd(rep1, ck1, lg1) == 0);

  // report: two teacher epochs plus a summary line
  const auto lines = json_lines(rep1);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0].at("phase").get<std::string>() == "teacher");
  CHECK(lines[0].at("iteration").get<int>() == 0);
  CHECK(lines[1].at("epoch").get<int>() == 2);
  const json summary = lines.back();
  CHECK(summary.at("iterations").get<int>() == 0);
  CHECK(summary.at("test_metrics").contains("macro_f1"));

  // bit-for-bit rerun
  const std::string rep2 = ws().path("rep2.jsonl"), ck2 = ws().path("ck2.bin"),
                    lg2 = ws().path("lg2.jsonl");
  REQUIRE(train_cmd(rep2, ck2, lg2) == 0);
  CHECK(slurp(rep1) == slurp(rep2));
  CHECK(slurp(ck1) == slurp(ck2));
  CHECK(slurp(lg1) == slurp(lg2));

  // train is selftrain with zero iterations
  std::vector<std::string> st0 = {"selftrain", "--iterations", "0"};
  st0.insert(st0.end(), common.begin(), common.end());
  const std::string rep3 = ws().path("rep3.jsonl"), ck3 = ws().path("ck3.bin");
  st0.insert(st0.end(), {"--report", rep3, "--checkpoint", ck3});
  REQUIRE(run(st0).code == 0);
  CHECK(slurp(rep3) == slurp(rep1));
  CHECK(slurp(ck3) == slurp(ck1));

  // a real self-training round adds student phases and moves the parameters
  std::vector<std::string> st1 = {"selftrain", "--iterations", "1", "--dropout-rate", "0.5"};
  st1.insert(st1.end(), common.begin(), common.end());
  const std::string rep4 = ws().path("rep4.jsonl"), ck4 = ws().path("ck4.bin");
  st1.insert(st1.end(), {"--report", rep4, "--checkpoint", ck4});
  REQUIRE(run(st1).code == 0);
  bool saw_student = false;
  for (const auto& line : json_lines(rep4)) {
    if (line.contains("phase") && line.at("phase") == "student") saw_student = true;
  }
  CHECK(saw_student);
  CHECK(slurp(ck4) != slurp(ck1));

  // eval reproduces the report's test metrics from the checkpoint
  const std::string metrics_path = ws().path("eval.json");
  REQUIRE(run({"eval", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index", ws().txt,
               "--alpha", "0.5", "--checkpoint", ck1, "--split", "test",
               "--retrieved-per-query", "3", "--consensus-size", "3", "--out", metrics_path})
              .code == 0);
  CHECK(json_lines(metrics_path)[0] == summary.at("test_metrics"));

  CHECK(run({"eval", "--corpus", ws().corpus, "--img-index", ws().img, "--txt-index", ws().txt,
             "--alpha", "0.5", "--checkpoint", ws().path("nope.bin"), "--out", metrics_path})
            .code == 2);

  // config validation surfaces as usage errors
  std::vector<std::string> bad = {"selftrain", "--iterations", "-1"};
  bad.insert(bad.end(), common.begin(), common.end());
  CHECK(run(bad).code == 1);
  std::vector<std::string> bad_rate = {"selftrain", "--dropout-rate", "1.0"};
  bad_rate.insert(bad_rate.end(), common.begin(), common.end());
  CHECK(run(bad_rate).code == 1);
}
