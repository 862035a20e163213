#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include "json.hpp"

#include "hat/io.hpp"

namespace hat {

namespace {

using nlohmann::json;

// All reads go through these helpers so every error carries the key path.

void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) {
    throw ConfigError("config key " + (path.empty() ? "<root>" : path) +
                      ": expected an object");
  }
}

void reject_unknown(const json& obj, const std::string& prefix,
                    std::initializer_list<const char*> known) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* k : known) {
      if (key == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError("config key " + prefix + key + ": unknown key");
    }
  }
}

void read_int(const json& obj, const std::string& prefix, const char* key,
              std::int64_t& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) {
    throw ConfigError("config key " + prefix + key + ": expected an integer");
  }
  out = v.get<std::int64_t>();
}

void read_double(const json& obj, const std::string& prefix, const char* key,
                 double& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number()) {
    throw ConfigError("config key " + prefix + key + ": expected a number");
  }
  out = v.get<double>();
}

void read_bool(const json& obj, const std::string& prefix, const char* key,
               bool& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_boolean()) {
    throw ConfigError("config key " + prefix + key + ": expected a boolean");
  }
  out = v.get<bool>();
}

void read_string(const json& obj, const std::string& prefix, const char* key,
                 std::string& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_string()) {
    throw ConfigError("config key " + prefix + key + ": expected a string");
  }
  out = v.get<std::string>();
}

void read_int_list(const json& obj, const std::string& prefix, const char* key,
                   std::vector<std::int64_t>& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_array()) {
    throw ConfigError("config key " + prefix + key +
                      ": expected an array of integers");
  }
  std::vector<std::int64_t> values;
  for (const json& item : v) {
    if (!item.is_number_integer()) {
      throw ConfigError("config key " + prefix + key +
                        ": expected an array of integers");
    }
    values.push_back(item.get<std::int64_t>());
  }
  out = std::move(values);
}

void parse_model(const json& obj, ModelConfig& m) {
  expect_object(obj, "model");
  reject_unknown(obj, "model.",
                 {"in_channels", "embed_dim", "num_rhag", "habs_per_rhag",
                  "window_size", "num_heads", "alpha", "cab_beta", "oca_gamma",
                  "mlp_ratio", "ca_reduction", "scale", "recon_feat",
                  "enable_cab", "enable_ocab", "cab_depthwise"});
  read_int(obj, "model.", "in_channels", m.in_channels);
  read_int(obj, "model.", "embed_dim", m.embed_dim);
  read_int(obj, "model.", "num_rhag", m.num_rhag);
  read_int(obj, "model.", "habs_per_rhag", m.habs_per_rhag);
  read_int(obj, "model.", "window_size", m.window_size);
  read_int(obj, "model.", "num_heads", m.num_heads);
  read_double(obj, "model.", "alpha", m.alpha);
  read_int(obj, "model.", "cab_beta", m.cab_beta);
  read_double(obj, "model.", "oca_gamma", m.oca_gamma);
  read_double(obj, "model.", "mlp_ratio", m.mlp_ratio);
  read_int(obj, "model.", "ca_reduction", m.ca_reduction);
  read_int(obj, "model.", "scale", m.scale);
  read_int(obj, "model.", "recon_feat", m.recon_feat);
  read_bool(obj, "model.", "enable_cab", m.enable_cab);
  read_bool(obj, "model.", "enable_ocab", m.enable_ocab);
  read_bool(obj, "model.", "cab_depthwise", m.cab_depthwise);
}

void parse_train(const json& obj, TrainConfig& t) {
  expect_object(obj, "train");
  reject_unknown(obj, "train.",
                 {"batch_size", "patch_size", "total_iters", "base_lr",
                  "milestones", "adam_beta1", "adam_beta2", "adam_eps",
                  "grad_clip", "seed", "log_every", "phase", "init_checkpoint"});
  read_int(obj, "train.", "batch_size", t.batch_size);
  read_int(obj, "train.", "patch_size", t.patch_size);
  read_int(obj, "train.", "total_iters", t.total_iters);
  read_double(obj, "train.", "base_lr", t.base_lr);
  read_int_list(obj, "train.", "milestones", t.milestones);
  read_double(obj, "train.", "adam_beta1", t.adam_beta1);
  read_double(obj, "train.", "adam_beta2", t.adam_beta2);
  read_double(obj, "train.", "adam_eps", t.adam_eps);
  read_double(obj, "train.", "grad_clip", t.grad_clip);
  read_int(obj, "train.", "seed", t.seed);
  read_int(obj, "train.", "log_every", t.log_every);
  if (obj.contains("phase")) {
    std::string phase;
    read_string(obj, "train.", "phase", phase);
    try {
      t.phase = phase_from_string(phase);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config key train.phase: ") + e.what());
    }
  }
  read_string(obj, "train.", "init_checkpoint", t.init_checkpoint);
}

void parse_paths(const json& obj, PathsConfig& p) {
  expect_object(obj, "paths");
  reject_unknown(obj, "paths.", {"train_hr", "val_hr", "output_dir"});
  read_string(obj, "paths.", "train_hr", p.train_hr);
  read_string(obj, "paths.", "val_hr", p.val_hr);
  read_string(obj, "paths.", "output_dir", p.output_dir);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  expect_object(j, "");
  reject_unknown(j, "", {"model", "train", "paths"});
  RunConfig cfg;
  if (j.contains("model")) parse_model(j.at("model"), cfg.model);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("paths")) parse_paths(j.at("paths"), cfg.paths);

  cfg.model.validate();
  // The finetune init checkpoint may still arrive as a CLI flag; every other
  // train invariant is enforced right here.
  TrainConfig probe = cfg.train;
  if (probe.phase == Phase::finetune && probe.init_checkpoint.empty()) {
    probe.init_checkpoint = "(pending)";
  }
  probe.validate();
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string serialize_config(const RunConfig& cfg) {
  json model = {
      {"in_channels", cfg.model.in_channels},
      {"embed_dim", cfg.model.embed_dim},
      {"num_rhag", cfg.model.num_rhag},
      {"habs_per_rhag", cfg.model.habs_per_rhag},
      {"window_size", cfg.model.window_size},
      {"num_heads", cfg.model.num_heads},
      {"alpha", cfg.model.alpha},
      {"cab_beta", cfg.model.cab_beta},
      {"oca_gamma", cfg.model.oca_gamma},
      {"mlp_ratio", cfg.model.mlp_ratio},
      {"ca_reduction", cfg.model.ca_reduction},
      {"scale", cfg.model.scale},
      {"recon_feat", cfg.model.recon_feat},
      {"enable_cab", cfg.model.enable_cab},
      {"enable_ocab", cfg.model.enable_ocab},
      {"cab_depthwise", cfg.model.cab_depthwise},
  };
  json train = {
      {"batch_size", cfg.train.batch_size},
      {"patch_size", cfg.train.patch_size},
      {"total_iters", cfg.train.total_iters},
      {"base_lr", cfg.train.base_lr},
      {"milestones", cfg.train.milestones},
      {"adam_beta1", cfg.train.adam_beta1},
      {"adam_beta2", cfg.train.adam_beta2},
      {"adam_eps", cfg.train.adam_eps},
      {"grad_clip", cfg.train.grad_clip},
      {"seed", cfg.train.seed},
      {"log_every", cfg.train.log_every},
      {"phase", phase_to_string(cfg.train.phase)},
      {"init_checkpoint", cfg.train.init_checkpoint},
  };
  json paths = {
      {"train_hr", cfg.paths.train_hr},
      {"val_hr", cfg.paths.val_hr},
      {"output_dir", cfg.paths.output_dir},
  };
  json root = {{"model", model}, {"train", train}, {"paths", paths}};
  return root.dump(2) + "\n";
}

}  // namespace hat
