#pragma once

#include <filesystem>
#include <string>

#include "volseg/train/trainer.hpp"
#include "volseg/verify/gradcheck_suites.hpp"

namespace volseg {

/// Model plus training settings, as stored in one config document.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  KeyValueDoc to_doc() const {
    KeyValueDoc doc = model.to_doc();
    train.write_doc(doc);
    return doc;
  }

  static RunConfig from_doc(KeyValueDoc& doc) {
    RunConfig r;
    r.model = ModelConfig::from_doc(doc);
    r.train = TrainConfig::from_doc(doc);
    doc.require_all_consumed();
    return r;
  }
};

/// Full V2 at 4x32^3 on eight synthetic volumes, 200 Adam steps.
inline RunConfig overfit_recipe() {
  RunConfig r;
  r.model = ModelConfig::transbtsv2();
  r.model.name = "overfit";
  r.model.input_size = {32, 32, 32};
  r.train.base_lr = 3e-3;
  r.train.warmup_epochs = 1;
  r.train.total_epochs = 25;
  r.train.batch_size = 1;
  r.train.seed = 7;
  r.train.samples = 8;
  r.train.data_seed = 7;
  r.train.eval_every = 5;
  return r;
}

inline std::vector<std::string> preset_names() {
  return {"transbtsv2",   "transbts_v1", "ablation_B",     "ablation_B+TR",
          "ablation_B+TR+FEM", "ablation_B+TR+FEM+DBM", "ablation_full", "deep_narrow",
          "shallow_wide", "micro",       "overfit"};
}

inline RunConfig preset(const std::string& name) {
  RunConfig r;
  if (name == "transbtsv2" || name == "v2") {
    r.model = ModelConfig::transbtsv2();
  } else if (name == "transbts_v1" || name == "v1") {
    r.model = ModelConfig::transbts_v1();
  } else if (name.rfind("ablation_", 0) == 0) {
    r.model = ModelConfig::ablation(parse_ablation_variant(name.substr(9)));
  } else if (name == "deep_narrow") {
    r.model = ModelConfig::depth_width_pair().first;
  } else if (name == "shallow_wide") {
    r.model = ModelConfig::depth_width_pair().second;
  } else if (name == "micro") {
    r.model = micro_model_config();
    r.train.samples = 2;
    r.train.total_epochs = 4;
  } else if (name == "overfit") {
    r = overfit_recipe();
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  return r;
}

/// An existing file is parsed as a config document; anything else must name
/// a preset.
inline RunConfig load_run_config(const std::string& path_or_preset) {
  if (std::filesystem::is_regular_file(path_or_preset)) {
    auto doc = KeyValueDoc::load(path_or_preset);
    return RunConfig::from_doc(doc);
  }
  if (path_or_preset.find('/') != std::string::npos ||
      path_or_preset.find('.') != std::string::npos) {
    throw IoError("config file '" + path_or_preset + "' does not exist");
  }
  return preset(path_or_preset);
}

}  // namespace volseg
