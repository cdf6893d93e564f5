// checkpoint.hpp: versioned JSON checkpoints of named parameter blocks,
// hyper-parameters and optimizer state. Reals are written with round-trip
// precision, so save/load is bit-exact.

#pragma once

#include "softtrack/autodiff.hpp"
#include "softtrack/sequence.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace softtrack {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint
{
  std::string kind;             // "model" or "similarity"
  nlohmann::json hyper;         // full hyper-parameter set
  std::vector<std::pair<std::string, ad::Tensor>> params;
  std::vector<std::vector<double>> velocity;  // parallel to params, may be empty
  int epochs_completed = 0;
  long steps_completed = 0;
  std::vector<double> epoch_losses;

  bool operator==(const Checkpoint&) const = default;
};

class CheckpointError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

inline Checkpoint make_checkpoint(std::string kind, nlohmann::json hyper,
                                  std::span<const ad::NamedParam> params, const ad::SgdState* sgd)
{
  Checkpoint c;
  c.kind = std::move(kind);
  c.hyper = std::move(hyper);
  for (const auto& p : params) {
    ad::Tensor t(p.tensor->shape, p.tensor->values);
    c.params.emplace_back(p.name, std::move(t));
  }
  if (sgd) c.velocity = sgd->velocity;
  return c;
}

/// Copies checkpoint values into params, matching by name and shape.
inline void restore_params(const Checkpoint& c, std::span<const ad::NamedParam> params)
{
  std::map<std::string, const ad::Tensor*> by_name;
  for (const auto& [name, t] : c.params) by_name[name] = &t;
  if (by_name.size() != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(by_name.size()) + " parameters, model expects " +
                          std::to_string(params.size()));
  }
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second->shape != p.tensor->shape) {
      throw CheckpointError("parameter '" + p.name + "' has shape " + ad::shape_string(it->second->shape) +
                            " in checkpoint, model expects " + ad::shape_string(p.tensor->shape));
    }
    p.tensor->values = it->second->values;
    p.tensor->grad.clear();
  }
}

inline nlohmann::json to_json(const Checkpoint& c)
{
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : c.params) {
    for (double v : t.values) {
      if (!std::isfinite(v)) throw CheckpointError("parameter '" + name + "' holds a non-finite value");
    }
    params.push_back({{"name", name}, {"shape", t.shape}, {"values", t.values}});
  }
  return {{"format", "softtrack-checkpoint"},
          {"version", kCheckpointFormatVersion},
          {"kind", c.kind},
          {"hyper", c.hyper},
          {"epochs_completed", c.epochs_completed},
          {"steps_completed", c.steps_completed},
          {"epoch_losses", c.epoch_losses},
          {"params", params},
          {"velocity", c.velocity}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j)
{
  try {
    if (j.value("format", "") != "softtrack-checkpoint") throw CheckpointError("not a softtrack checkpoint");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kCheckpointFormatVersion) + ")");
    }
    Checkpoint c;
    c.kind = j.at("kind").get<std::string>();
    c.hyper = j.at("hyper");
    c.epochs_completed = j.at("epochs_completed").get<int>();
    c.steps_completed = j.at("steps_completed").get<long>();
    c.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
    for (const auto& p : j.at("params")) {
      auto shape = p.at("shape").get<std::vector<std::size_t>>();
      auto values = p.at("values").get<std::vector<double>>();
      if (ad::Tensor::numel(shape) != values.size()) {
        throw CheckpointError("parameter '" + p.at("name").get<std::string>() + "': shape and value count disagree");
      }
      c.params.emplace_back(p.at("name").get<std::string>(), ad::Tensor(std::move(shape), std::move(values)));
    }
    c.velocity = j.at("velocity").get<std::vector<std::vector<double>>>();
    if (!c.velocity.empty() && c.velocity.size() != c.params.size()) {
      throw CheckpointError("optimizer state does not match the parameter list");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path)
{
  write_file_atomic(path, to_json(c).dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return checkpoint_from_json(nlohmann::json::parse(buf.str()));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace softtrack
