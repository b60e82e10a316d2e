#ifndef SETVEC_CONFIG_HPP_
#define SETVEC_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "setvec/checkpoint.hpp"
#include "setvec/model.hpp"
#include "setvec/train.hpp"

namespace setvec {

// One JSON config drives every command; CLI flags overlay dotted-path keys.
// The fully merged tree is snapshotted next to the outputs so a run can be
// reproduced from its own artifacts.
class RunConfig {
public:
    static nlohmann::json defaults() {
        return nlohmann::json{
            {"task", "digits"},
            {"seed", 42},
            {"out", "runs/out"},
            {"data",
             {{"dir", "data/digits"},
              {"n_train", 2000},
              {"n_test", 500},
              {"min_size", 20},
              {"max_size", 50},
              {"digits",
               {{"source", "synthetic"},
                {"n_images", 4000},
                {"images", ""},
                {"labels", ""},
                {"test_images", ""},
                {"test_labels", ""}}},
              {"phantom",
               {{"size", 48},
                {"max_lesions", 4},
                {"lesion_intensity", 0.5},
                {"patch", 32},
                {"overlap", 0.4},
                {"min_lesion_frac", 0.0}}}}},
            {"model", {{"input", "2d"}, {"d", 16}, {"L", 8}, {"batchnorm", false}}},
            {"train",
             {{"lambda1", 100.0},
              {"lambda2", 0.01},
              {"epsilon", 1e-8},
              {"learning_rate", 0.001},
              {"beta1", 0.9},
              {"beta2", 0.999},
              {"eps_adam", 1e-8},
              {"epochs", 30},
              {"bags_per_step", 8},
              {"pool", "weighted"},
              {"recon_loss", "mse"},
              {"grad_clip", 0.0},
              {"val_fraction", 0.1},
              {"standardize_targets", true},
              {"threads", 0},
              {"resume", ""}}},
            {"eval", {{"checkpoint", ""}, {"split", "test"}}},
            {"ablate", {{"lambda1_list", nlohmann::json::array({0.0, 100.0})}, {"epochs", 30}}}};
    }

    static RunConfig load(const std::string& config_path, const std::vector<std::string>& sets,
                          const std::optional<std::string>& out,
                          const std::optional<std::uint64_t>& seed) {
        RunConfig rc;
        rc.j_ = defaults();
        if (!config_path.empty()) {
            std::ifstream is(config_path);
            if (!is) throw usage_error("cannot open config file: " + config_path);
            nlohmann::json file;
            try {
                is >> file;
            } catch (const nlohmann::json::exception& e) {
                throw format_error("config parse failure in " + config_path + ": " + e.what());
            }
            rc.merge(rc.j_, file, "");
        }
        for (const std::string& kv : sets) rc.apply_set(kv);
        if (out) rc.j_["out"] = *out;
        if (seed) rc.j_["seed"] = *seed;
        return rc;
    }

    const nlohmann::json& json() const { return j_; }

    std::string task() const { return j_.at("task").get<std::string>(); }
    std::uint64_t seed() const { return j_.at("seed").get<std::uint64_t>(); }
    std::filesystem::path out_dir() const { return j_.at("out").get<std::string>(); }
    std::filesystem::path data_dir() const { return j_.at("data").at("dir").get<std::string>(); }

    ModelConfig model_config() const {
        const auto& m = j_.at("model");
        ModelConfig cfg;
        cfg.input = input_kind_from(m.at("input").get<std::string>());
        cfg.d = m.at("d").get<std::size_t>();
        cfg.L = m.at("L").get<std::size_t>();
        cfg.batchnorm = m.at("batchnorm").get<bool>();
        return cfg;
    }

    TrainConfig train_config() const {
        const auto& t = j_.at("train");
        TrainConfig cfg;
        cfg.lambda1 = t.at("lambda1").get<double>();
        cfg.lambda2 = t.at("lambda2").get<double>();
        cfg.epsilon = t.at("epsilon").get<double>();
        cfg.learning_rate = t.at("learning_rate").get<double>();
        cfg.beta1 = t.at("beta1").get<double>();
        cfg.beta2 = t.at("beta2").get<double>();
        cfg.eps_adam = t.at("eps_adam").get<double>();
        cfg.epochs = t.at("epochs").get<std::size_t>();
        cfg.bags_per_step = t.at("bags_per_step").get<std::size_t>();
        cfg.rng_seed = seed();
        cfg.pool = pool_mode_from(t.at("pool").get<std::string>());
        cfg.recon = recon_loss_from(t.at("recon_loss").get<std::string>());
        cfg.grad_clip = t.at("grad_clip").get<double>();
        cfg.val_fraction = t.at("val_fraction").get<double>();
        cfg.standardize_targets = t.at("standardize_targets").get<bool>();
        cfg.threads = t.at("threads").get<std::size_t>();
        cfg.arch = model_config();
        return cfg;
    }

    std::string resolved_dump() const { return j_.dump(1) + "\n"; }

    // output location does not change what a run computes, so it stays out
    // of the hash that keys checkpoints and ablation caches
    std::uint64_t hash() const {
        nlohmann::json j = j_;
        j.erase("out");
        return fnv1a64(j.dump(1));
    }

    void write_snapshot(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        std::ofstream os(dir / "config.resolved.json");
        os << resolved_dump();
        if (!os) throw format_error("cannot write config snapshot under " + dir.string());
    }

private:
    // deep-merge file/overlay values over the defaults; unknown keys are
    // rejected so typos fail loudly
    void merge(nlohmann::json& base, const nlohmann::json& over, const std::string& prefix) {
        for (auto it = over.begin(); it != over.end(); ++it) {
            const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
            if (!base.contains(it.key())) throw usage_error("unknown config key: " + path);
            if (base[it.key()].is_object() && it.value().is_object())
                merge(base[it.key()], it.value(), path);
            else
                base[it.key()] = it.value();
        }
    }

    void apply_set(const std::string& kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw usage_error("--set expects key.path=value, got: " + kv);
        const std::string path = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);

        nlohmann::json* node = &j_;
        std::size_t pos = 0;
        std::string last;
        while (true) {
            const auto dot = path.find('.', pos);
            const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
            if (!node->contains(key)) throw usage_error("unknown config key: " + path);
            if (dot == std::string::npos) {
                last = key;
                break;
            }
            node = &(*node)[key];
            pos = dot + 1;
        }
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::exception&) {
            value = raw;  // plain string
        }
        if ((*node)[last].is_string() && !value.is_string())
            value = raw;  // keep strings stringly even if they parse as JSON
        (*node)[last] = value;
    }

    nlohmann::json j_;
};

}  // namespace setvec

#endif  // SETVEC_CONFIG_HPP_
