// softtrack: dataset generation, training, tracking, evaluation and report
// tables. Every command is deterministic given its config and seed.

#include "softtrack/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace softtrack;

namespace {

/// Relative output paths resolve under $SOFTTRACK_OUTPUT_DIR when it is set.
fs::path output_path(const fs::path& p)
{
  const char* root = std::getenv("SOFTTRACK_OUTPUT_DIR");
  if (root == nullptr || *root == '\0' || p.is_absolute()) return p;
  return fs::path(root) / p;
}

void ensure_parent(const fs::path& p)
{
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

nlohmann::json read_json(const fs::path& p)
{
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
}

std::string seq_file(int index, const char* ext)
{
  char name[40];
  std::snprintf(name, sizeof name, "seq_%04d%s", index, ext);
  return name;
}

// ---- gen -------------------------------------------------------------------

struct GenArgs
{
  std::string config;
  std::string out;
  std::optional<std::string> flavor;
  std::optional<int> num_particles;
  std::optional<int> num_frames;
  std::optional<int> train;
  std::optional<int> test;
  std::optional<std::uint64_t> seed;
  std::optional<double> p_drop;
};

int cmd_gen(const GenArgs& a)
{
  auto cfg = a.config.empty() ? ExperimentConfig{} : load_experiment_config(a.config);
  if (a.flavor) cfg.sim.flavor = sim::flavor_from_string(*a.flavor);
  if (a.num_particles) cfg.sim.num_particles = *a.num_particles;
  if (a.num_frames) cfg.sim.num_frames = *a.num_frames;
  if (a.train) cfg.split.train = *a.train;
  if (a.test) cfg.split.test = *a.test;
  if (a.seed) cfg.master_seed = *a.seed;
  if (a.p_drop) cfg.p_drop = *a.p_drop;
  cfg.validate();
  const auto out = output_path(a.out);
  const auto d = generate_dataset(cfg);
  write_dataset(d, cfg, out);
  std::cout << "wrote " << d.train.size() << " train and " << d.test.size() << " test sequences to " << out.string()
            << "\n";
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs
{
  std::string data;
  std::string out;
  std::string config;
  std::string method = "ours";
  std::string resume;
  std::string loss_log;
  std::optional<int> epochs;
  bool no_ae = false;
  bool no_occ = false;
  std::optional<int> l_future;
};

/// Reads the rows of an existing loss log up to and including step `upto`.
std::vector<std::string> read_log_prefix(const fs::path& p, long upto)
{
  std::vector<std::string> rows;
  std::ifstream in(p);
  std::string line;
  if (!in || !std::getline(in, line)) return rows;  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stol(line.substr(0, line.find(','))) > upto) break;
    rows.push_back(line);
  }
  return rows;
}

int cmd_train(const TrainArgs& a)
{
  auto data = read_dataset(a.data);
  ExperimentConfig cfg = a.config.empty() ? data.config : load_experiment_config(a.config);
  if (a.epochs) cfg.training.epochs = *a.epochs;
  if (a.no_ae) cfg.model.attention_encoding = false;
  if (a.no_occ) cfg.model.occlusion_state = false;
  if (a.l_future) cfg.model.L_future = *a.l_future;
  cfg.validate();
  const auto out = output_path(a.out);
  ensure_parent(out);
  const auto log_path = output_path(a.loss_log.empty() ? fs::path(out.string() + ".loss.csv") : fs::path(a.loss_log));
  ensure_parent(log_path);

  if (a.method == "learned") {
    if (!a.resume.empty()) throw std::invalid_argument("--resume applies to the attention model only");
    auto st = cfg.similarity;
    st.seed = stream_seed(cfg.master_seed, SeedStream::SimilarityTraining);
    std::vector<double> losses;
    auto params = train_learned_baseline(cfg, data.train, &losses);
    std::ostringstream log;
    log << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) log << i + 1 << ',' << fixed(losses[i], 8) << '\n';
    write_file_atomic(log_path, log.str());
    save_checkpoint(similarity_checkpoint(params, st, cfg.baselines, losses), out);
    std::cout << "similarity network trained for " << losses.size() << " steps; checkpoint " << out.string() << "\n";
    return 0;
  }
  if (a.method != "ours") throw std::invalid_argument("unknown training method '" + a.method + "'");

  TrainingConfig tc = cfg.training;
  tc.seed = stream_seed(cfg.master_seed, SeedStream::Training);
  ModelParams params;
  ModelConfig mc = cfg.model;
  TrainState state;
  std::vector<std::string> log_rows;
  if (!a.resume.empty()) {
    const auto ckpt = load_checkpoint(a.resume);
    auto loaded = load_model(ckpt);
    tc = training_config_from_json(ckpt.hyper.at("training"), tc);
    if (a.epochs) tc.epochs = *a.epochs;
    mc = loaded.config;
    params = std::move(loaded.params);
    state = std::move(loaded.state);
    log_rows = read_log_prefix(log_path, state.steps_completed);
  } else {
    params = init_model_params(mc, stream_seed(cfg.master_seed, SeedStream::ModelInit));
  }

  auto write_log = [&] {
    std::ostringstream log;
    log << "step,epoch,loss\n";
    for (const auto& r : log_rows) log << r << '\n';
    write_file_atomic(log_path, log.str());
  };
  // The initial state is the last good checkpoint until the first epoch ends.
  save_checkpoint(model_checkpoint(params, mc, tc, state), out);
  TrainCallbacks cb;
  cb.on_step = [&](long step, double loss) {
    log_rows.push_back(std::to_string(step) + ',' + std::to_string(state.epochs_completed + 1) + ',' + fixed(loss, 8));
  };
  cb.on_epoch = [&](int epoch, double mean) {
    save_checkpoint(model_checkpoint(params, mc, tc, state), out);
    write_log();
    std::cout << "epoch " << epoch << "/" << tc.epochs << "  mean loss " << fixed(mean, 6) << std::endl;
  };
  try {
    train_model(data.train, params, mc, tc, cfg.tracker.T_lost_P, state, cb);
  } catch (const NonFiniteLoss&) {
    write_log();
    throw;
  }
  write_log();
  std::cout << variant_name(mc) << " trained: " << state.epochs_completed << " epochs, " << state.steps_completed
            << " steps; checkpoint " << out.string() << "\n";
  return 0;
}

// ---- track -----------------------------------------------------------------

struct TrackArgs
{
  std::string data;
  std::string method;
  std::string checkpoint;
  std::string out;
  std::string split = "test";
  std::optional<int> l_future;
  bool sort_lifecycle = false;
};

int cmd_track(const TrackArgs& a)
{
  const auto data = read_dataset(a.data);
  const auto& seqs = a.split == "train" ? data.train : data.test;
  if (a.split != "train" && a.split != "test") throw std::invalid_argument("--split must be train or test");
  TrackerConfig tcfg = a.sort_lifecycle ? TrackerConfig::sort_preset() : data.config.tracker;
  if (a.l_future) tcfg.L_future = *a.l_future;
  tcfg.validate();

  std::vector<RunResult> runs;
  std::string label;
  nlohmann::json hyper;
  if (a.method == "ours") {
    if (a.checkpoint.empty()) throw std::invalid_argument("method 'ours' needs --checkpoint");
    auto model = load_model(load_checkpoint(a.checkpoint));
    runs = track_ours(seqs, model.config, model.params, tcfg);
    label = variant_name(model.config);
    hyper = to_json(model.config);
  } else {
    const auto kind = baseline_kind_from_string(a.method);
    std::optional<SimilarityParams> sp;
    if (kind == BaselineKind::Learned) {
      if (a.checkpoint.empty()) throw std::invalid_argument("method 'learned' needs --checkpoint");
      sp = load_similarity(load_checkpoint(a.checkpoint));
    }
    runs = track_baseline(seqs, kind, tcfg, data.config.baselines, sp ? &*sp : nullptr);
    label = display_name(kind);
    hyper = to_json(data.config.baselines);
  }
  const auto out = output_path(a.out);
  fs::create_directories(out);
  nlohmann::json files = nlohmann::json::array();
  int idx = 0;
  for (const auto& e : data.manifest) {
    if (e.split != a.split) continue;
    const auto name = seq_file(e.index, ".tracks.jsonl");
    save_run(runs.at(static_cast<std::size_t>(idx++)), out / name);
    files.push_back({{"sequence", e.path}, {"tracks", name}});
  }
  nlohmann::json run = {{"format", "softtrack-run"}, {"version", 1},      {"method", label},
                        {"data", fs::absolute(a.data).string()},             {"split", a.split},
                        {"tracker", to_json(tcfg)}, {"hyper", hyper}, {"files", files}};
  write_file_atomic(out / "run.json", run.dump(2) + "\n");
  std::cout << label << ": tracked " << runs.size() << " sequences into " << out.string() << "\n";
  return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs
{
  std::string tracks;
  std::string data;
  std::string out;
  std::string matching = "identity";
  double threshold = 0.1;
};

int cmd_eval(const EvalArgs& a)
{
  const fs::path dir = a.tracks;
  const auto run = read_json(dir / "run.json");
  if (run.value("format", "") != "softtrack-run") throw std::runtime_error("not a softtrack run directory");
  const fs::path data_dir = a.data.empty() ? fs::path(run.at("data").get<std::string>()) : fs::path(a.data);
  Matching m;
  if (a.matching == "identity") m = Matching::identity();
  else if (a.matching == "distance") m = Matching::distance(a.threshold);
  else throw std::invalid_argument("--matching must be identity or distance");

  std::vector<Sequence> seqs;
  std::vector<RunResult> runs;
  for (const auto& f : run.at("files")) {
    seqs.push_back(load_sequence(data_dir / f.at("sequence").get<std::string>()));
    runs.push_back(load_run(dir / f.at("tracks").get<std::string>()));
  }
  const auto ev = evaluate_runs(seqs, runs, m);
  const std::string method = run.at("method").get<std::string>();
  auto j = to_json(ev);
  j["method"] = method;
  j["matching"] = a.matching;
  j["format"] = "softtrack-eval";
  j["version"] = 1;
  const auto out = output_path(a.out.empty() ? dir / "eval.json" : fs::path(a.out));
  ensure_parent(out);
  write_file_atomic(out, j.dump(2) + "\n");
  std::cout << render_report({{method, ev.total}});
  std::cout << "occlusion: accuracy " << fixed(100.0 * ev.occlusion.accuracy()) << "  recall "
            << fixed(100.0 * ev.occlusion.recall()) << "  precision " << fixed(100.0 * ev.occlusion.precision())
            << "\n";
  return 0;
}

// ---- report ----------------------------------------------------------------

struct ReportArgs
{
  std::vector<std::string> evals;
  std::string out;
  std::string title;
};

int cmd_report(const ReportArgs& a)
{
  std::vector<ReportRow> rows;
  std::map<std::string, std::size_t> seen;
  for (const auto& path : a.evals) {
    const auto j = read_json(path);
    if (j.value("format", "") != "softtrack-eval") throw std::runtime_error(path + ": not an eval result");
    const auto method = j.at("method").get<std::string>();
    const auto total = mot_report_from_json(j.at("total"));
    // Several eval files of one method (e.g. split runs) add up count-wise.
    if (auto it = seen.find(method); it != seen.end()) {
      rows[it->second].report += total;
    } else {
      seen[method] = rows.size();
      rows.push_back({method, total});
    }
  }
  const std::string table = (a.title.empty() ? "" : a.title + "\n") + render_report(rows);
  std::cout << table;
  if (!a.out.empty()) {
    const auto out = output_path(a.out);
    fs::create_directories(out);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      auto e = to_json(r.report);
      e["method"] = r.method;
      e["mota"] = r.report.mota();
      e["idf1"] = r.report.idf1();
      j.push_back(e);
    }
    write_file_atomic(out / "report.txt", table);
    write_file_atomic(out / "report.json",
                      nlohmann::json{{"format", "softtrack-report"}, {"title", a.title}, {"rows", j}}.dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"softtrack: attention-based association tracker for simulated particle scenes"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a train/test dataset with a manifest");
  g->add_option("--config", gen.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--flavor", gen.flavor, "basic | occlusion | social");
  g->add_option("--num-particles", gen.num_particles, "particles per sequence");
  g->add_option("--num-frames", gen.num_frames, "frames per sequence");
  g->add_option("--train", gen.train, "number of train sequences");
  g->add_option("--test", gen.test, "number of test sequences");
  g->add_option("--seed", gen.seed, "master seed");
  g->add_option("--p-drop", gen.p_drop, "controlled detection drop probability");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the association model or the learned-similarity baseline");
  t->add_option("--data", tr.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--config", tr.config, "experiment config overriding the dataset's")->check(CLI::ExistingFile);
  t->add_option("--method", tr.method, "ours | learned")->check(CLI::IsMember({"ours", "learned"}));
  t->add_option("--resume", tr.resume, "continue from this checkpoint")->check(CLI::ExistingFile);
  t->add_option("--loss-log", tr.loss_log, "per-step loss CSV (default <out>.loss.csv)");
  t->add_option("--epochs", tr.epochs, "total epochs");
  t->add_flag("--no-ae", tr.no_ae, "disable the attention encoder");
  t->add_flag("--no-occ", tr.no_occ, "disable the occlusion state");
  t->add_option("--l-future", tr.l_future, "future frames the relative table must cover");

  TrackArgs tk;
  auto* k = app.add_subcommand("track", "run a tracker over a dataset split");
  k->add_option("--data", tk.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  k->add_option("--method", tk.method, "ours | iou | center | learned")
    ->required()
    ->check(CLI::IsMember({"ours", "iou", "center", "learned"}));
  k->add_option("--checkpoint", tk.checkpoint, "checkpoint for ours/learned")->check(CLI::ExistingFile);
  k->add_option("--out", tk.out, "output directory for track files")->required();
  k->add_option("--split", tk.split, "train | test")->check(CLI::IsMember({"train", "test"}));
  k->add_option("--l-future", tk.l_future, "frames of look-ahead for the attention model");
  k->add_flag("--sort-lifecycle", tk.sort_lifecycle, "kill tracks after one missed frame");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score a tracking run against ground truth");
  e->add_option("--tracks", ev.tracks, "directory written by track")->required()->check(CLI::ExistingDirectory);
  e->add_option("--data", ev.data, "dataset directory (default: the one recorded by track)");
  e->add_option("--out", ev.out, "result JSON (default <tracks>/eval.json)");
  e->add_option("--matching", ev.matching, "identity | distance")->check(CLI::IsMember({"identity", "distance"}));
  e->add_option("--threshold", ev.threshold, "center distance threshold for distance matching");

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "render a method-by-metric table from eval results");
  r->add_option("evals", rp.evals, "eval JSON files")->required()->check(CLI::ExistingFile);
  r->add_option("--out", rp.out, "directory for report.txt and report.json");
  r->add_option("--title", rp.title, "table title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*k) return cmd_track(tk);
    if (*e) return cmd_eval(ev);
    if (*r) return cmd_report(rp);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}
