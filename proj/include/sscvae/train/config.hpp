#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "sscvae/core/kv.hpp"
#include "sscvae/model/arch.hpp"
#include "sscvae/model/objectives.hpp"

namespace sscvae::train {

struct TrainConfig {
  double lambda1 = 10.0;
  double lambda2 = 10.0;
  double learning_rate = 0.001;
  int batch_size = 64;
  double temperature = 0.1;
  model::KlSign kl_sign = model::KlSign::kPlus;
  int epochs_stage1 = 30;
  int epochs_stage2 = 15;
  int epochs_stage3 = 30;
  std::uint64_t seed = 1;
  bool branch_salient_map = true;
  bool branch_background = true;
  bool branch_classifier = true;
  double distill_weight = 0.1;
  model::ArchConfig arch;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0)
      throw std::invalid_argument("config: lambda weights must be nonnegative");
    if (learning_rate <= 0) throw std::invalid_argument("config: learning_rate <= 0");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size < 1");
    if (temperature <= 0) throw std::invalid_argument("config: temperature <= 0");
    if (epochs_stage1 < 0 || epochs_stage2 < 0 || epochs_stage3 < 0)
      throw std::invalid_argument("config: negative epoch count");
    if (distill_weight < 0) throw std::invalid_argument("config: distill_weight < 0");
    arch.validate();
  }

  KvText to_kv() const {
    KvText kv;
    kv.set_double("lambda1", lambda1);
    kv.set_double("lambda2", lambda2);
    kv.set_double("learning_rate", learning_rate);
    kv.set_int("batch_size", batch_size);
    kv.set_int("latent_dim_s", arch.latent_dim_s);
    kv.set_int("latent_dim_z", arch.latent_dim_z);
    kv.set_double("temperature", temperature);
    kv.set("kl_sign", model::kl_sign_name(kl_sign));
    kv.set_int("epochs_stage1", epochs_stage1);
    kv.set_int("epochs_stage2", epochs_stage2);
    kv.set_int("epochs_stage3", epochs_stage3);
    kv.set_int("seed", static_cast<long long>(seed));
    kv.set_bool("branch_salient_map", branch_salient_map);
    kv.set_bool("branch_background", branch_background);
    kv.set_bool("branch_classifier", branch_classifier);
    kv.set_double("distill_weight", distill_weight);
    const KvText arch_kv = arch.to_kv();
    for (const auto& [key, value] : arch_kv.pairs())
      if (key != "arch.latent_dim_s" && key != "arch.latent_dim_z")
        kv.set(key, value);
    return kv;
  }

  // Unknown keys are rejected so config typos cannot silently fall back to
  // defaults. Latent dimensions are exposed as flat keys.
  static TrainConfig from_kv(const KvText& kv) {
    TrainConfig c;
    KvText arch_kv = c.arch.to_kv();
    const std::set<std::string> arch_keys = [&] {
      std::set<std::string> keys;
      for (const auto& [key, value] : arch_kv.pairs()) keys.insert(key);
      return keys;
    }();

    for (const auto& [key, value] : kv.pairs()) {
      if (key == "lambda1") c.lambda1 = kv.get_double(key);
      else if (key == "lambda2") c.lambda2 = kv.get_double(key);
      else if (key == "learning_rate") c.learning_rate = kv.get_double(key);
      else if (key == "batch_size") c.batch_size = static_cast<int>(kv.get_int(key));
      else if (key == "latent_dim_s") arch_kv.set("arch.latent_dim_s", value);
      else if (key == "latent_dim_z") arch_kv.set("arch.latent_dim_z", value);
      else if (key == "temperature") c.temperature = kv.get_double(key);
      else if (key == "kl_sign") c.kl_sign = model::parse_kl_sign(value);
      else if (key == "epochs_stage1") c.epochs_stage1 = static_cast<int>(kv.get_int(key));
      else if (key == "epochs_stage2") c.epochs_stage2 = static_cast<int>(kv.get_int(key));
      else if (key == "epochs_stage3") c.epochs_stage3 = static_cast<int>(kv.get_int(key));
      else if (key == "seed") c.seed = static_cast<std::uint64_t>(kv.get_int(key));
      else if (key == "branch_salient_map") c.branch_salient_map = kv.get_bool(key);
      else if (key == "branch_background") c.branch_background = kv.get_bool(key);
      else if (key == "branch_classifier") c.branch_classifier = kv.get_bool(key);
      else if (key == "distill_weight") c.distill_weight = kv.get_double(key);
      else if (arch_keys.count(key)) arch_kv.set(key, value);
      else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    c.arch = model::ArchConfig::from_kv(arch_kv);
    c.validate();
    return c;
  }

  static TrainConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return from_kv(KvText::parse(ss.str()));
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write config: " + path);
    os << to_kv().to_text();
  }
};

}  // namespace sscvae::train
