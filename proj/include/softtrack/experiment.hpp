// experiment.hpp: experiment configuration, deterministic dataset
// generation with a manifest, and the train/track/evaluate pipelines shared
// by the command-line tool and the acceptance suite.

#pragma once

#include "softtrack/baselines.hpp"
#include "softtrack/checkpoint.hpp"
#include "softtrack/metrics.hpp"
#include "softtrack/model.hpp"
#include "softtrack/random.hpp"
#include "softtrack/sequence.hpp"
#include "softtrack/sim.hpp"
#include "softtrack/tracker.hpp"
#include "softtrack/train.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace softtrack {

/// Child streams of the master seed.
enum class SeedStream : std::uint64_t
{
  TrainSequences = 1,
  TestSequences = 2,
  Drop = 3,
  ModelInit = 4,
  Training = 5,
  SimilarityInit = 6,
  SimilarityTraining = 7,
};

inline std::uint64_t stream_seed(std::uint64_t master, SeedStream s)
{
  return derive_seed(master, static_cast<std::uint64_t>(s));
}

struct Split
{
  int train = 200;
  int test = 10;
};

struct ExperimentConfig
{
  std::uint64_t master_seed = 0;
  sim::SimConfig sim;
  std::optional<double> p_drop;  // drop noise on every sequence when set
  Split split;
  ModelConfig model;
  TrackerConfig tracker;
  TrainingConfig training;
  BaselineConfig baselines;
  SimilarityTraining similarity;

  void validate() const
  {
    sim.validate();
    model.validate();
    tracker.validate();
    training.validate();
    if (split.train < 0 || split.test < 0) throw std::invalid_argument("split counts must be >= 0");
    if (p_drop && (*p_drop < 0.0 || *p_drop > 1.0)) throw std::invalid_argument("p_drop outside [0,1]");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c)
{
  auto sim = sim::to_json(c.sim);
  sim.erase("seed");
  return {{"master_seed", c.master_seed},
          {"sim", sim},
          {"p_drop", c.p_drop ? nlohmann::json(*c.p_drop) : nlohmann::json(nullptr)},
          {"split", {{"train", c.split.train}, {"test", c.split.test}}},
          {"model", to_json(c.model)},
          {"tracker", to_json(c.tracker)},
          {"training", to_json(c.training)},
          {"baselines", to_json(c.baselines)},
          {"similarity_training", to_json(c.similarity)}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j)
{
  static const char* known[] = {"master_seed", "sim",       "p_drop",    "split",
                                "model",       "tracker",   "training",  "baselines",
                                "similarity_training"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("unknown experiment config key '" + key + "'");
    }
  }
  ExperimentConfig c;
  c.master_seed = j.value("master_seed", c.master_seed);
  if (j.contains("sim")) c.sim = sim::sim_config_from_json(j.at("sim"), c.sim);
  if (j.contains("p_drop") && !j.at("p_drop").is_null()) c.p_drop = j.at("p_drop").get<double>();
  if (j.contains("split")) {
    c.split.train = j.at("split").value("train", c.split.train);
    c.split.test = j.at("split").value("test", c.split.test);
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  if (j.contains("tracker")) c.tracker = tracker_config_from_json(j.at("tracker"), c.tracker);
  if (j.contains("training")) c.training = training_config_from_json(j.at("training"), c.training);
  if (j.contains("baselines")) c.baselines = baseline_config_from_json(j.at("baselines"), c.baselines);
  if (j.contains("similarity_training")) {
    c.similarity = similarity_training_from_json(j.at("similarity_training"), c.similarity);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  try {
    return experiment_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

struct ManifestEntry
{
  std::string split;
  int index = 0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> drop_seed;
  std::string path;  // relative to the manifest directory
};

struct Dataset
{
  std::vector<Sequence> train;
  std::vector<Sequence> test;
  std::vector<ManifestEntry> manifest;
};

/// Sequence `index` of a split; a pure function of (config, split, index).
inline Sequence make_sequence(const ExperimentConfig& cfg, bool test, int index, ManifestEntry* entry = nullptr)
{
  sim::SimConfig sc = cfg.sim;
  const auto stream = test ? SeedStream::TestSequences : SeedStream::TrainSequences;
  sc.seed = derive_seed(stream_seed(cfg.master_seed, stream), static_cast<std::uint64_t>(index));
  auto seq = sim::generate_sequence(sc);
  std::optional<std::uint64_t> drop_seed;
  if (cfg.p_drop) {
    sim::DropConfig dc;
    dc.p_drop = *cfg.p_drop;
    dc.seed = derive_seed(stream_seed(cfg.master_seed, SeedStream::Drop), sc.seed);
    drop_seed = dc.seed;
    seq = sim::apply_drop_noise(seq, dc);
  }
  if (entry) {
    entry->split = test ? "test" : "train";
    entry->index = index;
    entry->seed = sc.seed;
    entry->drop_seed = drop_seed;
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04d.jsonl", index);
    entry->path = entry->split + "/" + name;
  }
  return seq;
}

inline Dataset generate_dataset(const ExperimentConfig& cfg)
{
  cfg.validate();
  Dataset d;
  for (int split = 0; split < 2; ++split) {
    const bool test = split == 1;
    const int n = test ? cfg.split.test : cfg.split.train;
    for (int i = 0; i < n; ++i) {
      ManifestEntry e;
      auto seq = make_sequence(cfg, test, i, &e);
      (test ? d.test : d.train).push_back(std::move(seq));
      d.manifest.push_back(std::move(e));
    }
  }
  return d;
}

inline nlohmann::json manifest_json(const ExperimentConfig& cfg, const std::vector<ManifestEntry>& entries)
{
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : entries) {
    list.push_back({{"split", e.split},
                    {"index", e.index},
                    {"seed", e.seed},
                    {"drop_seed", e.drop_seed ? nlohmann::json(*e.drop_seed) : nlohmann::json(nullptr)},
                    {"path", e.path}});
  }
  return {{"format", "softtrack-manifest"}, {"version", 1}, {"config", to_json(cfg)}, {"sequences", list}};
}

/// Writes every sequence and manifest.json under dir.
inline void write_dataset(const Dataset& d, const ExperimentConfig& cfg, const std::filesystem::path& dir)
{
  std::filesystem::create_directories(dir / "train");
  std::filesystem::create_directories(dir / "test");
  std::size_t tr = 0, te = 0;
  for (const auto& e : d.manifest) {
    const auto& seq = e.split == "test" ? d.test.at(te++) : d.train.at(tr++);
    save_sequence(seq, dir / e.path);
  }
  write_file_atomic(dir / "manifest.json", manifest_json(cfg, d.manifest).dump(2) + "\n");
}

struct LoadedDataset
{
  ExperimentConfig config;
  std::vector<Sequence> train;
  std::vector<Sequence> test;
  std::vector<ManifestEntry> manifest;
};

inline LoadedDataset read_dataset(const std::filesystem::path& dir)
{
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  if (j.value("format", "") != "softtrack-manifest") throw std::runtime_error("not a softtrack manifest");
  LoadedDataset out;
  out.config = experiment_config_from_json(j.at("config"));
  for (const auto& e : j.at("sequences")) {
    ManifestEntry m;
    m.split = e.at("split").get<std::string>();
    m.index = e.at("index").get<int>();
    m.seed = e.at("seed").get<std::uint64_t>();
    if (!e.at("drop_seed").is_null()) m.drop_seed = e.at("drop_seed").get<std::uint64_t>();
    m.path = e.at("path").get<std::string>();
    auto seq = load_sequence(dir / m.path);
    (m.split == "test" ? out.test : out.train).push_back(std::move(seq));
    out.manifest.push_back(std::move(m));
  }
  return out;
}

/// Trains the association model from its initialization.
inline ModelParams train_ours(const ExperimentConfig& cfg, std::span<const Sequence> train,
                              TrainState* state_out = nullptr, const TrainCallbacks& cb = {})
{
  auto params = init_model_params(cfg.model, stream_seed(cfg.master_seed, SeedStream::ModelInit));
  TrainingConfig tc = cfg.training;
  tc.seed = stream_seed(cfg.master_seed, SeedStream::Training);
  TrainState state;
  train_model(train, params, cfg.model, tc, cfg.tracker.T_lost_P, state, cb);
  if (state_out) *state_out = std::move(state);
  return params;
}

inline SimilarityParams train_learned_baseline(const ExperimentConfig& cfg, std::span<const Sequence> train,
                                               std::vector<double>* losses = nullptr)
{
  auto params = init_similarity_params(stream_seed(cfg.master_seed, SeedStream::SimilarityInit));
  SimilarityTraining st = cfg.similarity;
  st.seed = stream_seed(cfg.master_seed, SeedStream::SimilarityTraining);
  auto l = train_similarity(train, params, st, cfg.baselines, cfg.tracker.T_lost_P);
  if (losses) *losses = std::move(l);
  return params;
}

struct Evaluation
{
  MotReport total;
  OcclusionReport occlusion;
  std::vector<MotReport> per_sequence;
};

inline nlohmann::json to_json(const Evaluation& e)
{
  nlohmann::json per = nlohmann::json::array();
  for (const auto& r : e.per_sequence) per.push_back(to_json(r));
  return {{"total", to_json(e.total)}, {"occlusion", to_json(e.occlusion)}, {"per_sequence", per}};
}

inline Evaluation evaluate_runs(std::span<const Sequence> seqs, std::span<const RunResult> runs,
                                Matching matching = {})
{
  if (seqs.size() != runs.size()) throw std::invalid_argument("evaluate_runs: sequence/run count mismatch");
  Evaluation e;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    auto r = evaluate(seqs[i], runs[i].output, matching);
    e.per_sequence.push_back(r);
    e.total += r;
    e.occlusion += occlusion_report(seqs[i], runs[i].occlusion);
  }
  return e;
}

inline std::vector<RunResult> track_ours(std::span<const Sequence> seqs, const ModelConfig& model,
                                         const ModelParams& params, const TrackerConfig& tracker)
{
  std::vector<RunResult> runs;
  for (const auto& s : seqs) runs.push_back(run_sequence(s, model, params, tracker));
  return runs;
}

inline std::vector<RunResult> track_baseline(std::span<const Sequence> seqs, BaselineKind kind,
                                             const TrackerConfig& tracker, const BaselineConfig& cfg,
                                             const SimilarityParams* params = nullptr)
{
  std::vector<RunResult> runs;
  for (const auto& s : seqs) runs.push_back(run_baseline(kind, s, tracker, cfg, params));
  return runs;
}

/// Table label of a baseline.
inline std::string display_name(BaselineKind k)
{
  switch (k) {
    case BaselineKind::Iou: return "IOU";
    case BaselineKind::Center: return "Center";
    case BaselineKind::Learned: return "Learned";
  }
  return "?";
}

/// Display name of a model variant, e.g. "Ours +AE+Occ".
inline std::string variant_name(const ModelConfig& m)
{
  std::string s = "Ours ";
  if (!m.attention_encoding && !m.occlusion_state) return s + "-AE-Occ";
  if (m.attention_encoding) s += "+AE";
  if (m.occlusion_state) s += "+Occ";
  return s;
}


inline Checkpoint similarity_checkpoint(SimilarityParams& params, const SimilarityTraining& st,
                                        const BaselineConfig& bc, const std::vector<double>& losses)
{
  auto named = params.named();
  auto c = make_checkpoint("similarity", {{"similarity_training", to_json(st)}, {"baselines", to_json(bc)}}, named,
                           nullptr);
  c.epochs_completed = 1;
  c.steps_completed = static_cast<long>(losses.size());
  return c;
}

inline SimilarityParams load_similarity(const Checkpoint& c)
{
  if (c.kind != "similarity") throw CheckpointError("checkpoint kind '" + c.kind + "' is not a similarity network");
  auto p = init_similarity_params(0);
  auto named = p.named();
  restore_params(c, named);
  return p;
}

inline void save_run(const RunResult& run, const std::filesystem::path& path)
{
  write_file_atomic(path, dump_run(run));
}

inline RunResult load_run(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open tracks file " + path.string());
  try {
    return parse_run(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Canonical row order of the result tables.
inline const std::vector<std::string>& method_order()
{
  static const std::vector<std::string> order = {"IOU",      "Center",   "Learned",     "Ours -AE-Occ",
                                                 "Ours +AE", "Ours +Occ", "Ours +AE+Occ"};
  return order;
}

struct ReportRow
{
  std::string method;
  MotReport report;
};

/// Method-by-metric table; known methods first in canonical order.
inline std::string render_report(std::vector<ReportRow> rows)
{
  const auto& order = method_order();
  auto rank = [&](const std::string& m) {
    auto it = std::find(order.begin(), order.end(), m);
    return it == order.end() ? order.size() : static_cast<std::size_t>(it - order.begin());
  };
  std::stable_sort(rows.begin(), rows.end(),
                   [&](const ReportRow& a, const ReportRow& b) { return rank(a.method) < rank(b.method); });
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({r.method, fixed(100.0 * r.report.mota()), fixed(100.0 * r.report.idf1()),
                     std::to_string(r.report.ids), std::to_string(r.report.fp), std::to_string(r.report.fn)});
  }
  return format_table({"Method", "MOTA", "IDF1", "IDS", "FP", "FN"}, cells);
}

}  // namespace softtrack
