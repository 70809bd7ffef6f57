// Command-line pipeline: pretrain-teacher -> train -> generate -> evaluate,
// plus the decoder-length sweep and the distillation ablation drivers.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cvaekd/checkpoint.hpp"
#include "cvaekd/config.hpp"
#include "cvaekd/corpus.hpp"
#include "cvaekd/metrics.hpp"
#include "cvaekd/model.hpp"
#include "cvaekd/retrieval.hpp"
#include "cvaekd/teacher.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cvaekd;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Split {
  std::vector<std::string> train, val, test;
};

// Seeded 80/10/10 split over pair ids, deterministic per (corpus, seed).
Split split_corpus(const std::vector<NewsReportPair>& pairs,
                   std::uint64_t seed) {
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed ^ 0x5eedful);
  rng.shuffle(order);
  const std::size_t n = pairs.size();
  const std::size_t n_test = n / 10;
  const std::size_t n_val = n / 10;
  Split s;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& id = pairs[order[i]].id;
    if (i < n_test)
      s.test.push_back(id);
    else if (i < n_test + n_val)
      s.val.push_back(id);
    else
      s.train.push_back(id);
  }
  return s;
}

std::vector<NewsReportPair> select_pairs(
    const std::vector<NewsReportPair>& pairs,
    const std::vector<std::string>& ids) {
  PairLookup lut(pairs);
  std::vector<NewsReportPair> out;
  out.reserve(ids.size());
  for (const std::string& id : ids) out.push_back(lut.at(id));
  return out;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const std::string& l : lines) out << l << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

json split_to_json(const Split& s) {
  return {{"train", s.train}, {"val", s.val}, {"test", s.test}};
}

Split split_from_json(const json& j) {
  Split s;
  s.train = j.at("train").get<std::vector<std::string>>();
  s.val = j.at("val").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

// Every artifact directory records the command, config and seed that
// produced it; runs are reproducible from their artifacts alone.
void write_run_meta(const fs::path& out_dir, const std::string& command,
                    const CvaeKdConfig& cfg, json extra = json::object()) {
  json meta;
  meta["command"] = command;
  meta["config"] = cfg.to_json();
  meta["seed"] = cfg.seed;
  meta["extra"] = std::move(extra);
  write_json_file((out_dir / "run_meta.json").string(), meta);
}

TeacherConfig teacher_config_from(const CvaeKdConfig& cfg) {
  TeacherConfig tc;
  tc.hidden = cfg.teacher_hidden;
  tc.emb = cfg.teacher_emb;
  tc.epochs = cfg.teacher_epochs;
  tc.batch = cfg.batch;
  tc.max_len = cfg.max_dec;
  tc.lr = cfg.lr;
  tc.grad_clip = cfg.grad_clip;
  tc.temperature = cfg.temperature;
  tc.seed = cfg.seed;
  return tc;
}

void check_vocab_match(const Vocabulary& a, const Vocabulary& b,
                       const std::string& what) {
  if (a.tokens() != b.tokens())
    throw DataError("vocabulary mismatch between " + what);
}

// ---------------------------------------------------------------------
// pretrain-teacher
// ---------------------------------------------------------------------
void cmd_pretrain_teacher(const std::string& corpus_path,
                          const CvaeKdConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  auto pairs = load_corpus(corpus_path);
  if (pairs.empty()) throw DataError("corpus is empty: " + corpus_path);
  Split split = split_corpus(pairs, cfg.seed);
  auto train_pairs = select_pairs(pairs, split.train);
  auto vocab = std::make_shared<Vocabulary>(
      Vocabulary::build(train_pairs, cfg.min_tf, cfg.tf_strict));

  std::vector<TeacherEpochStats> log;
  TeacherLM teacher =
      TeacherLM::train(train_pairs, vocab, teacher_config_from(cfg), &log);

  json ckpt = teacher.to_json();
  ckpt["split"] = split_to_json(split);
  write_json_file((out_dir / "teacher.json").string(), ckpt);

  std::string csv = "epoch,ppl_fwd,ppl_bwd\n";
  for (std::size_t e = 0; e < log.size(); ++e)
    csv += std::to_string(e) + "," + std::to_string(log[e].ppl_fwd) + "," +
           std::to_string(log[e].ppl_bwd) + "\n";
  write_text(out_dir / "teacher_log.csv", csv);
  vocab->save((out_dir / "vocab.txt").string());
  write_lines(out_dir / "train.ids", split.train);
  write_lines(out_dir / "val.ids", split.val);
  write_lines(out_dir / "test.ids", split.test);
  write_run_meta(out_dir, "pretrain-teacher", cfg,
                 {{"corpus", corpus_path}, {"frozen", teacher.frozen()}});
  std::cout << "teacher trained: " << (out_dir / "teacher.json").string()
            << " (" << vocab->size() << " vocab tokens, " << log.size()
            << " epochs)\n";
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------
struct TrainOutput {
  fs::path best_checkpoint;
  Split split;
};

TrainOutput run_training(const std::vector<NewsReportPair>& pairs,
                         const CvaeKdConfig& cfg, const TeacherLM* teacher,
                         const fs::path& out_dir,
                         const std::string& csv_name = "loss.csv") {
  cfg.validate();
  fs::create_directories(out_dir);
  Split split = split_corpus(pairs, cfg.seed);
  auto train_pairs = select_pairs(pairs, split.train);
  if (train_pairs.empty()) throw DataError("training split is empty");
  auto vocab = std::make_shared<Vocabulary>(
      Vocabulary::build(train_pairs, cfg.min_tf, cfg.tf_strict));
  if (teacher) check_vocab_match(teacher->vocab(), *vocab,
                                 "teacher checkpoint and training corpus");

  auto train_examples = make_examples(train_pairs, *vocab, cfg);
  auto val_examples =
      make_examples(select_pairs(pairs, split.val), *vocab, cfg);
  NeighborIndex index = NeighborIndex::build(train_pairs, cfg.k_neighbors);
  PairLookup lookup(train_pairs);
  BackgroundSource bg{&index, &lookup, cfg.k_neighbors};

  CvaeKdModel model(cfg, vocab);
  std::vector<Tensor> params = model.trainable();
  AdamState opt(params, {cfg.lr});
  Rng noise_rng(cfg.seed + 1);
  RngNoise noise(noise_rng);

  vocab->save((out_dir / "vocab.txt").string());
  write_lines(out_dir / "train.ids", split.train);
  write_lines(out_dir / "val.ids", split.val);
  write_lines(out_dir / "test.ids", split.test);

  std::ofstream csv(out_dir / csv_name);
  if (!csv) throw DataError("cannot write loss csv");
  csv << "step,recon,kl,l_cvae,l_kd,total\n";
  csv.precision(10);

  auto checkpoint_json = [&](std::size_t epoch, double val_loss) {
    json j = model.to_json();
    j["adam"] = adam_to_json(opt);
    j["split"] = split_to_json(split);
    j["epoch"] = epoch;
    j["val_loss"] = val_loss;
    return j;
  };

  std::size_t step = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch_idx :
         make_batches(train_examples.size(), cfg.batch,
                      cfg.seed + 100 + epoch)) {
      std::vector<const TrainExample*> batch;
      batch.reserve(batch_idx.size());
      for (std::size_t i : batch_idx) batch.push_back(&train_examples[i]);
      LossBreakdown v =
          train_step(batch, model, teacher, opt, bg, step, noise);
      csv << step << ',' << v.recon << ',' << v.kl << ',' << v.l_cvae << ','
          << v.l_kd << ',' << v.total << '\n';
      ++step;
    }
    const double val_loss =
        val_examples.empty()
            ? evaluate_loss(train_examples, model, teacher, bg)
            : evaluate_loss(val_examples, model, teacher, bg);
    json ckpt = checkpoint_json(epoch, val_loss);
    write_json_file(
        (out_dir / ("epoch_" + std::to_string(epoch) + ".json")).string(),
        ckpt);
    if (val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch;
    }
    std::cout << "epoch " << epoch << ": val_loss " << val_loss << '\n';
  }
  // best-by-validation-loss checkpoint, copied under a stable name
  const fs::path best_src =
      out_dir / ("epoch_" + std::to_string(best_epoch) + ".json");
  const fs::path best_dst = out_dir / "best.json";
  fs::copy_file(best_src, best_dst, fs::copy_options::overwrite_existing);
  return {best_dst, split};
}

void cmd_train(const std::string& corpus_path, const CvaeKdConfig& cfg,
               const std::string& teacher_path, const fs::path& out_dir) {
  auto pairs = load_corpus(corpus_path);
  if (pairs.empty()) throw DataError("corpus is empty: " + corpus_path);
  std::unique_ptr<TeacherLM> teacher;
  if (cfg.kd_enabled) {
    if (teacher_path.empty())
      throw UsageError("train: --teacher is required unless --no-kd");
    teacher = std::make_unique<TeacherLM>(
        TeacherLM::from_json(read_json_file(teacher_path)));
    if (!teacher->frozen())
      throw DataError("teacher checkpoint is not frozen: " + teacher_path);
  }
  TrainOutput res =
      run_training(pairs, cfg, teacher.get(), out_dir);
  write_run_meta(out_dir, "train", cfg,
                 {{"corpus", corpus_path},
                  {"teacher", teacher_path},
                  {"best", res.best_checkpoint.string()}});
  std::cout << "best checkpoint: " << res.best_checkpoint.string() << '\n';
}

// ---------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------
struct GenerateArgs {
  std::string checkpoint, teacher, corpus, news, out_file;
  std::size_t max_len = 200;
  bool any_length = false;
  bool sample = false;
  std::uint64_t seed = 0;
};

void generate_file(const CvaeKdModel& model, const TeacherLM* teacher,
                   const BackgroundSource& bg, const std::string& news_path,
                   const fs::path& out_file, std::size_t max_len,
                   bool sample, std::uint64_t seed) {
  std::ifstream in(news_path);
  if (!in) throw DataError("cannot open news file: " + news_path);
  std::ofstream out(out_file);
  if (!out) throw DataError("cannot write " + out_file.string());
  Rng sample_rng(seed + 7);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("news line " + std::to_string(lineno) +
                      ": invalid JSON: " + e.what());
    }
    if (!obj.contains("id") || !obj.contains("news"))
      throw DataError("news line " + std::to_string(lineno) +
                      ": need id and news fields");
    const std::string id = obj["id"].get<std::string>();
    auto tokens = split_tokens(obj["news"].get<std::string>());
    auto generated =
        model.generate(tokens, teacher, bg, max_len, !sample,
                       sample ? &sample_rng : nullptr, id);
    std::string joined;
    for (std::size_t i = 0; i < generated.size(); ++i) {
      if (i) joined += ' ';
      joined += generated[i];
    }
    out << json{{"id", id}, {"generated", joined}}.dump() << '\n';
  }
}

void cmd_generate(const GenerateArgs& a) {
  if (!a.any_length &&
      !(a.max_len == 100 || a.max_len == 150 || a.max_len == 200))
    throw UsageError(
        "generate: --max-len must be 100, 150 or 200 (or pass --any-length)");
  json ckpt = read_json_file(a.checkpoint);
  CvaeKdModel model = CvaeKdModel::from_json(ckpt);

  std::unique_ptr<TeacherLM> teacher;
  if (model.config.kd_enabled) {
    if (a.teacher.empty())
      throw UsageError("generate: checkpoint was trained with distillation; "
                       "--teacher is required");
    teacher = std::make_unique<TeacherLM>(
        TeacherLM::from_json(read_json_file(a.teacher)));
    check_vocab_match(teacher->vocab(), *model.vocab,
                      "teacher and model checkpoints");
  }

  auto pairs = load_corpus(a.corpus);
  std::vector<NewsReportPair> base = pairs;
  if (ckpt.contains("split"))
    base = select_pairs(pairs, split_from_json(ckpt.at("split")).train);
  NeighborIndex index = NeighborIndex::build(base, model.config.k_neighbors);
  PairLookup lookup(base);
  BackgroundSource bg{&index, &lookup, model.config.k_neighbors};

  const fs::path out_file(a.out_file);
  if (out_file.has_parent_path())
    fs::create_directories(out_file.parent_path());
  generate_file(model, teacher.get(), bg, a.news, out_file, a.max_len,
                a.sample, a.seed);

  json meta;
  meta["command"] = "generate";
  meta["config"] = model.config.to_json();
  meta["seed"] = a.seed;
  meta["extra"] = {{"checkpoint", a.checkpoint},
                   {"news", a.news},
                   {"max_len", a.max_len},
                   {"deterministic", !a.sample}};
  write_json_file(out_file.string() + ".meta.json", meta);
  std::cout << "generated reports written to " << out_file.string() << '\n';
}

// ---------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------
std::vector<EvalPair> read_eval_pairs(const std::string& predictions_path,
                                      const std::string& references_path) {
  auto read_jsonl = [](const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);
    std::vector<json> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        rows.push_back(json::parse(line));
      } catch (const json::exception& e) {
        throw DataError(path + " line " + std::to_string(lineno) +
                        ": invalid JSON: " + e.what());
      }
    }
    return rows;
  };
  auto field = [](const json& j, std::initializer_list<const char*> names,
                  const std::string& what) -> std::string {
    for (const char* n : names)
      if (j.contains(n) && j[n].is_string()) return j[n].get<std::string>();
    throw DataError(what + ": missing text field");
  };

  std::unordered_map<std::string, std::string> refs;
  for (const json& r : read_jsonl(references_path))
    refs[r.at("id").get<std::string>()] =
        field(r, {"report", "reference"}, "reference record");

  std::vector<EvalPair> pairs;
  for (const json& p : read_jsonl(predictions_path)) {
    const std::string id = p.at("id").get<std::string>();
    auto it = refs.find(id);
    if (it == refs.end())
      throw DataError("id mismatch: prediction id \"" + id +
                      "\" has no reference");
    pairs.push_back({split_tokens(field(p, {"generated", "report"},
                                          "prediction record")),
                     split_tokens(it->second)});
  }
  if (pairs.empty()) throw DataError("no prediction records found");
  return pairs;
}

void cmd_evaluate(const std::string& predictions, const std::string& refs,
                  const std::string& out_dir_str) {
  auto pairs = read_eval_pairs(predictions, refs);
  ScoreReport r = score_all(pairs);
  json j = score_to_json(r);
  std::string table = format_score_table({{"scores", r}});
  std::cout << j.dump(1) << '\n' << table;
  if (!out_dir_str.empty()) {
    fs::path out_dir(out_dir_str);
    fs::create_directories(out_dir);
    write_json_file((out_dir / "scores.json").string(), j);
    write_text(out_dir / "scores.txt", table);
  }
}

// ---------------------------------------------------------------------
// sweep-length: one trained checkpoint, generation at 100/150/200
// ---------------------------------------------------------------------
void cmd_sweep_length(const GenerateArgs& base, const std::string& out_dir_str) {
  fs::path out_dir(out_dir_str);
  fs::create_directories(out_dir);
  json ckpt = read_json_file(base.checkpoint);
  CvaeKdModel model = CvaeKdModel::from_json(ckpt);
  std::unique_ptr<TeacherLM> teacher;
  if (model.config.kd_enabled) {
    if (base.teacher.empty())
      throw UsageError("sweep-length: --teacher is required for this model");
    teacher = std::make_unique<TeacherLM>(
        TeacherLM::from_json(read_json_file(base.teacher)));
    check_vocab_match(teacher->vocab(), *model.vocab,
                      "teacher and model checkpoints");
  }
  auto pairs = load_corpus(base.corpus);
  if (!ckpt.contains("split"))
    throw DataError("sweep-length: checkpoint carries no split manifest");
  Split split = split_from_json(ckpt.at("split"));
  auto train_pairs = select_pairs(pairs, split.train);
  auto eval_pairs = select_pairs(pairs, split.test.empty() ? split.train
                                                           : split.test);
  NeighborIndex index =
      NeighborIndex::build(train_pairs, model.config.k_neighbors);
  PairLookup lookup(train_pairs);
  BackgroundSource bg{&index, &lookup, model.config.k_neighbors};

  // references file for the eval split
  const fs::path refs_path = out_dir / "references.jsonl";
  {
    std::ofstream refs(refs_path);
    for (const auto& p : eval_pairs) {
      std::string joined;
      for (std::size_t i = 0; i < p.report_tokens.size(); ++i) {
        if (i) joined += ' ';
        joined += p.report_tokens[i];
      }
      refs << json{{"id", p.id}, {"report", joined}}.dump() << '\n';
    }
  }
  const fs::path news_path = out_dir / "news.jsonl";
  {
    std::ofstream news(news_path);
    for (const auto& p : eval_pairs) {
      std::string joined;
      for (std::size_t i = 0; i < p.news_tokens.size(); ++i) {
        if (i) joined += ' ';
        joined += p.news_tokens[i];
      }
      news << json{{"id", p.id}, {"news", joined}}.dump() << '\n';
    }
  }

  std::vector<std::pair<std::string, ScoreReport>> rows;
  json sweep = json::array();
  for (std::size_t len : {std::size_t{100}, std::size_t{150},
                          std::size_t{200}}) {
    const fs::path gen_path =
        out_dir / ("gen_" + std::to_string(len) + ".jsonl");
    generate_file(model, teacher.get(), bg, news_path.string(), gen_path,
                  len, base.sample, base.seed);
    auto eval = read_eval_pairs(gen_path.string(), refs_path.string());
    ScoreReport r = score_all(eval);
    rows.emplace_back("max_len=" + std::to_string(len), r);
    json row = score_to_json(r);
    row["max_len"] = len;
    sweep.push_back(std::move(row));
  }
  write_json_file((out_dir / "sweep.json").string(), sweep);
  const std::string table = format_score_table(rows);
  write_text(out_dir / "sweep.txt", table);
  write_run_meta(out_dir, "sweep-length", model.config,
                 {{"checkpoint", base.checkpoint}});
  std::cout << table;
}

// ---------------------------------------------------------------------
// ablate: same corpus and seed, with and without distillation
// ---------------------------------------------------------------------
void cmd_ablate(const std::string& corpus_path, const CvaeKdConfig& cfg,
                const std::string& teacher_path,
                const std::string& out_dir_str) {
  if (teacher_path.empty())
    throw UsageError("ablate: --teacher is required for the with-kd arm");
  fs::path out_dir(out_dir_str);
  fs::create_directories(out_dir);
  auto pairs = load_corpus(corpus_path);
  TeacherLM teacher = TeacherLM::from_json(read_json_file(teacher_path));

  auto run_arm = [&](bool kd, const fs::path& arm_dir,
                     const std::string& csv_name) {
    CvaeKdConfig arm_cfg = cfg;
    arm_cfg.kd_enabled = kd;
    TrainOutput res = run_training(pairs, arm_cfg,
                                   kd ? &teacher : nullptr, arm_dir,
                                   csv_name);
    // generate on the test split with the trained best checkpoint
    json ckpt = read_json_file(res.best_checkpoint.string());
    CvaeKdModel model = CvaeKdModel::from_json(ckpt);
    auto train_pairs = select_pairs(pairs, res.split.train);
    auto eval_ids = res.split.test.empty() ? res.split.train : res.split.test;
    auto eval_pairs = select_pairs(pairs, eval_ids);
    NeighborIndex index =
        NeighborIndex::build(train_pairs, model.config.k_neighbors);
    PairLookup lookup(train_pairs);
    BackgroundSource bg{&index, &lookup, model.config.k_neighbors};
    std::vector<EvalPair> scored;
    for (const auto& p : eval_pairs) {
      auto gen = model.generate(p.news_tokens, kd ? &teacher : nullptr, bg,
                                model.config.max_dec, true, nullptr, p.id);
      scored.push_back({gen, p.report_tokens});
    }
    return score_all(scored);
  };

  ScoreReport with_kd = run_arm(true, out_dir / "with_kd", "loss.csv");
  ScoreReport no_kd = run_arm(false, out_dir / "no_kd", "loss.csv");

  std::vector<std::pair<std::string, ScoreReport>> rows = {
      {"with-kd", with_kd}, {"no-kd", no_kd}};
  const std::string table = format_score_table(rows);
  json j = json::array();
  json row_kd = score_to_json(with_kd);
  row_kd["mode"] = "with-kd";
  json row_no = score_to_json(no_kd);
  row_no["mode"] = "no-kd";
  j.push_back(std::move(row_kd));
  j.push_back(std::move(row_no));
  write_json_file((out_dir / "ablate.json").string(), j);
  write_text(out_dir / "ablate.txt", table);
  write_run_meta(out_dir, "ablate", cfg,
                 {{"corpus", corpus_path}, {"teacher", teacher_path}});
  std::cout << table;
}

CvaeKdConfig assemble_config(const std::string& config_path,
                             const std::vector<std::string>& overrides) {
  CvaeKdConfig cfg;
  if (!config_path.empty()) cfg = load_config_file(config_path);
  for (const std::string& kv : overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw UsageError("--set expects key=value, got: " + kv);
    set_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CVAE-KD financial report generation pipeline"};
  app.require_subcommand(1);

  std::string corpus, config_path, checkpoint, teacher, out_dir, news_file,
      out_file, predictions, references;
  std::vector<std::string> overrides;
  std::size_t max_len = 200;
  bool no_kd = false, sample = false, any_length = false, deterministic = false;
  double alpha = -1.0;
  long long k_neighbors = -1, seed = -1, epochs = -1;

  auto add_config_opts = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value config file");
    sub->add_option("--set", overrides,
                    "config override key=value (repeatable)");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--alpha", alpha, "CVAE/KD mixing weight in [0,1]");
    sub->add_option("--k", k_neighbors, "neighbors per query");
    sub->add_option("--epochs", epochs, "training epochs");
    sub->add_flag("--no-kd", no_kd, "disable knowledge distillation");
  };

  CLI::App* sub_teacher = app.add_subcommand(
      "pretrain-teacher", "train and freeze the bidirectional teacher LM");
  sub_teacher->add_option("--corpus", corpus)->required();
  sub_teacher->add_option("--out", out_dir)->required();
  add_config_opts(sub_teacher);

  CLI::App* sub_train =
      app.add_subcommand("train", "train the CVAE-KD model");
  sub_train->add_option("--corpus", corpus)->required();
  sub_train->add_option("--teacher", teacher,
                        "frozen teacher checkpoint (omit with --no-kd)");
  sub_train->add_option("--out", out_dir)->required();
  add_config_opts(sub_train);

  CLI::App* sub_gen =
      app.add_subcommand("generate", "generate reports for a news file");
  sub_gen->add_option("--checkpoint", checkpoint)->required();
  sub_gen->add_option("--teacher", teacher);
  sub_gen->add_option("--corpus", corpus, "background corpus")->required();
  sub_gen->add_option("--news", news_file, "JSONL with id + news")->required();
  sub_gen->add_option("--out", out_file, "output JSONL path")->required();
  sub_gen->add_option("--max-len", max_len, "100, 150 or 200");
  sub_gen->add_flag("--any-length", any_length,
                    "allow max-len outside {100,150,200}");
  sub_gen->add_flag("--deterministic", deterministic,
                    "eps = 0 decoding (default)");
  sub_gen->add_flag("--sample", sample, "sample z instead");
  sub_gen->add_option("--seed", seed, "sampling seed");

  CLI::App* sub_eval = app.add_subcommand("evaluate", "score predictions");
  sub_eval->add_option("--predictions", predictions)->required();
  sub_eval->add_option("--references", references)->required();
  sub_eval->add_option("--out", out_dir, "directory for scores.json/.txt");

  CLI::App* sub_sweep = app.add_subcommand(
      "sweep-length", "generate and score at decoder lengths 100/150/200");
  sub_sweep->add_option("--checkpoint", checkpoint)->required();
  sub_sweep->add_option("--teacher", teacher);
  sub_sweep->add_option("--corpus", corpus)->required();
  sub_sweep->add_option("--out", out_dir)->required();
  sub_sweep->add_option("--seed", seed);

  CLI::App* sub_ablate = app.add_subcommand(
      "ablate", "train with and without distillation on the same seed");
  sub_ablate->add_option("--corpus", corpus)->required();
  sub_ablate->add_option("--teacher", teacher)->required();
  sub_ablate->add_option("--out", out_dir)->required();
  add_config_opts(sub_ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    CvaeKdConfig cfg = assemble_config(config_path, overrides);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (alpha >= 0.0) cfg.alpha = alpha;
    if (k_neighbors > 0) cfg.k_neighbors = static_cast<std::size_t>(k_neighbors);
    if (epochs >= 0) cfg.epochs = static_cast<std::size_t>(epochs);
    if (no_kd) cfg.kd_enabled = false;
    (void)deterministic;  // the default; --sample switches

    if (sub_teacher->parsed()) {
      cmd_pretrain_teacher(corpus, cfg, out_dir);
    } else if (sub_train->parsed()) {
      cmd_train(corpus, cfg, teacher, out_dir);
    } else if (sub_gen->parsed()) {
      GenerateArgs a{checkpoint, teacher,   corpus,
                     news_file,  out_file,  max_len,
                     any_length, sample,    seed >= 0
                                                ? static_cast<std::uint64_t>(seed)
                                                : 0};
      cmd_generate(a);
    } else if (sub_eval->parsed()) {
      cmd_evaluate(predictions, references, out_dir);
    } else if (sub_sweep->parsed()) {
      GenerateArgs a;
      a.checkpoint = checkpoint;
      a.teacher = teacher;
      a.corpus = corpus;
      a.seed = seed >= 0 ? static_cast<std::uint64_t>(seed) : 0;
      cmd_sweep_length(a, out_dir);
    } else if (sub_ablate->parsed()) {
      cmd_ablate(corpus, cfg, teacher, out_dir);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
