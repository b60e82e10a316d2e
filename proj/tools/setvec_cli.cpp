// Command-line entry point: dataset generation, training, evaluation,
// attention/vector export, spectrum reports, and the lambda1 ablation, all
// driven by one JSON config with dotted-path overrides.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "setvec/checkpoint.hpp"
#include "setvec/config.hpp"
#include "setvec/data.hpp"
#include "setvec/eval.hpp"
#include "setvec/model.hpp"
#include "setvec/train.hpp"

namespace fs = std::filesystem;
using namespace setvec;

namespace {

void append_run_log(const fs::path& dir, const std::string& what, std::uint64_t config_hash) {
    // the log header is the only place a timestamp is allowed to appear
    fs::create_directories(dir);
    std::ofstream os(dir / "run.log", std::ios::app);
    const std::time_t now = std::time(nullptr);
    char stamp[64];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash));
    os << stamp << " " << what << " config=" << hash << "\n";
}

// --- dataset assembly -------------------------------------------------------

DigitDataset load_digit_pool(const RunConfig& rc, bool test_pool) {
    const auto& dj = rc.json().at("data").at("digits");
    const std::string source = dj.at("source").get<std::string>();
    if (source == "synthetic") {
        const std::size_t n = dj.at("n_images").get<std::size_t>();
        const std::uint64_t seed =
            Rng::derive(rc.seed(), test_pool ? "digit-pool-test" : "digit-pool-train");
        return make_digit_dataset(seed, n);
    }
    if (source != "idx") throw usage_error("data.digits.source must be synthetic or idx");

    auto read_bytes = [](const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is)
            throw usage_error("digit source file missing: " + path +
                              " (download the IDX files or switch data.digits.source "
                              "to synthetic)");
        return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(is)),
                                         std::istreambuf_iterator<char>());
    };
    const std::string images_key = test_pool ? "test_images" : "images";
    const std::string labels_key = test_pool ? "test_labels" : "labels";
    std::string images_path = dj.at(images_key).get<std::string>();
    std::string labels_path = dj.at(labels_key).get<std::string>();
    if (test_pool && images_path.empty()) {
        // no separate held-out files: carve a deterministic tail off the
        // training pool
        DigitDataset full;
        full.images = parse_idx_images(read_bytes(dj.at("images").get<std::string>()));
        full.labels = parse_idx_labels(read_bytes(dj.at("labels").get<std::string>()));
        const std::size_t n = full.size(), split = n - n / 6;
        DigitDataset tail;
        tail.images = TensorT<double>({n - split, 28, 28});
        std::memcpy(tail.images.data(), full.images.data() + split * 28 * 28,
                    (n - split) * 28 * 28 * sizeof(double));
        tail.labels.assign(full.labels.begin() + std::ptrdiff_t(split), full.labels.end());
        return tail;
    }
    DigitDataset ds;
    ds.images = parse_idx_images(read_bytes(images_path));
    ds.labels = parse_idx_labels(read_bytes(labels_path));
    if (ds.images.extent(0) != ds.labels.size())
        throw format_error("digit image/label counts disagree");
    return ds;
}

std::vector<Bag> build_phantom_bags(const RunConfig& rc, std::size_t count, const char* stream,
                                    const char* prefix) {
    const auto& pj = rc.json().at("data").at("phantom");
    const std::size_t size = pj.at("size").get<std::size_t>();
    const std::size_t max_lesions = pj.at("max_lesions").get<std::size_t>();
    const double intensity = pj.at("lesion_intensity").get<double>();
    const std::size_t patch = pj.at("patch").get<std::size_t>();
    const double overlap = pj.at("overlap").get<double>();
    const double min_frac = pj.at("min_lesion_frac").get<double>();
    const std::uint64_t base = Rng::derive(rc.seed(), stream);

    std::vector<Bag> bags;
    bags.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        char id[64];
        std::snprintf(id, sizeof id, "%s-%06zu", prefix, i);
        bags.push_back(
            make_phantom_bag(base + i, id, size, max_lesions, intensity, patch, overlap, min_frac));
    }
    return bags;
}

void print_bag_summary(const char* split, const std::vector<Bag>& bags) {
    std::size_t min_n = SIZE_MAX, max_n = 0, total = 0, relevant = 0, instances = 0;
    double y_min = 1e300, y_max = -1e300, y_sum = 0;
    for (const auto& bag : bags) {
        min_n = std::min(min_n, bag.size());
        max_n = std::max(max_n, bag.size());
        total += bag.size();
        for (std::uint8_t r : bag.relevance) relevant += r;
        instances += bag.relevance.size();
        y_min = std::min(y_min, double(bag.y));
        y_max = std::max(y_max, double(bag.y));
        y_sum += double(bag.y);
    }
    std::printf("%s: %zu bags, sizes [%zu,%zu] (mean %.1f), y in [%g,%g] (mean %.3f)", split,
                bags.size(), min_n, max_n, double(total) / double(bags.size()), y_min, y_max,
                y_sum / double(bags.size()));
    if (instances)
        std::printf(", relevant instances %.1f%%", 100.0 * double(relevant) / double(instances));
    std::printf("\n");
}

int cmd_gen_data(const RunConfig& rc) {
    const fs::path dir = rc.data_dir();
    const auto& dj = rc.json().at("data");
    const std::size_t n_train = dj.at("n_train").get<std::size_t>();
    const std::size_t n_test = dj.at("n_test").get<std::size_t>();

    std::vector<Bag> train_bags, test_bags;
    if (rc.task() == "digits") {
        const std::size_t min_size = dj.at("min_size").get<std::size_t>();
        const std::size_t max_size = dj.at("max_size").get<std::size_t>();
        DigitDataset train_pool = load_digit_pool(rc, false);
        DigitDataset test_pool = load_digit_pool(rc, true);
        train_bags = make_bags(train_pool, Rng::derive(rc.seed(), "bags-train"), n_train, min_size,
                               max_size, "train");
        test_bags = make_bags(test_pool, Rng::derive(rc.seed(), "bags-test"), n_test, min_size,
                              max_size, "test");
    } else if (rc.task() == "phantom") {
        train_bags = build_phantom_bags(rc, n_train, "phantom-train", "train");
        test_bags = build_phantom_bags(rc, n_test, "phantom-test", "test");
    } else {
        throw usage_error("unknown task: " + rc.task());
    }

    save_bag_dataset(dir / "train", train_bags, rc.task());
    save_bag_dataset(dir / "test", test_bags, rc.task());
    rc.write_snapshot(dir);
    append_run_log(dir, "gen-data", rc.hash());
    print_bag_summary("train", train_bags);
    print_bag_summary("test", test_bags);
    return 0;
}

// --- training ----------------------------------------------------------------

int cmd_train(const RunConfig& rc) {
    const fs::path out = rc.out_dir();
    TrainConfig tc = rc.train_config();
    std::vector<Bag> bags = load_bag_dataset(rc.data_dir() / "train");

    std::optional<Checkpoint> resume;
    const std::string resume_path = rc.json().at("train").at("resume").get<std::string>();
    if (!resume_path.empty()) resume = load_checkpoint(resume_path, &tc.arch);

    TrainResult result = train(bags, tc, nullptr, resume ? &*resume : nullptr);

    rc.write_snapshot(out);
    write_metrics_ndjson(out / "metrics.ndjson", result.log);
    Checkpoint ck;
    ck.params = result.params;
    ck.adam_m = result.opt.m;
    ck.adam_v = result.opt.v;
    ck.adam_t = result.opt.t;
    ck.has_optimizer = true;
    ck.config_hash = rc.hash();
    ck.rng_seed = rc.seed();
    save_checkpoint(out / "checkpoint.bin", ck);
    append_run_log(out, "train", rc.hash());

    if (result.aborted) {
        std::fprintf(stderr, "training aborted on non-finite loss: %s\n",
                     result.abort_reason.c_str());
        std::fprintf(stderr, "last good checkpoint retained at %s\n",
                     (out / "checkpoint.bin").string().c_str());
        throw numeric_error(result.abort_reason);
    }
    if (!result.log.empty()) {
        const auto& last = result.log.back();
        std::printf("trained %zu epochs, %llu steps, total %.6g", result.log.size(),
                    static_cast<unsigned long long>(last.step), last.total);
        if (last.val_r2) std::printf(", val_r2 %.4f", *last.val_r2);
        std::printf("\n");
    }
    return 0;
}

// --- evaluation helpers ------------------------------------------------------

struct EvalOutputs {
    std::vector<double> y, yhat;
    std::vector<AttentionMap> maps;
    Tensor latents;  // [rows, d], capped
};

EvalOutputs run_model(const Model& model, const std::vector<Bag>& bags, PoolMode pool_mode,
                      std::size_t latent_cap = 20000) {
    EvalOutputs out;
    std::vector<double> latbuf;
    std::size_t rows = 0;
    const std::size_t d = model.config().d;
    for (const auto& bag : bags) {
        BagCacheT<double> c;
        model.encode_bag(bag.patches, BnMode::eval, &c);
        model.attention(c.H, &c);
        const Tensor v = pool(c.H, pool_mode, &c.alpha);
        const double raw = predict(v, model.params().pred_w, model.params().pred_b[0]);
        out.y.push_back(double(bag.y));
        out.yhat.push_back(model.params().target_affine[0] +
                           model.params().target_affine[1] * raw);
        AttentionMap map;
        map.weights = c.alpha;
        map.patch_ids.resize(bag.size());
        for (std::size_t j = 0; j < bag.size(); ++j) map.patch_ids[j] = j;
        map.coordinates = bag.coordinates;
        out.maps.push_back(std::move(map));
        if (rows < latent_cap) {
            const std::size_t take = std::min(bag.size(), latent_cap - rows);
            latbuf.insert(latbuf.end(), c.H.data(), c.H.data() + take * d);
            rows += take;
        }
    }
    out.latents = Tensor::from({rows, d}, std::move(latbuf));
    return out;
}

Model load_model(const RunConfig& rc) {
    std::string path = rc.json().at("eval").at("checkpoint").get<std::string>();
    if (path.empty()) path = (rc.out_dir() / "checkpoint.bin").string();
    const ModelConfig arch = rc.model_config();
    Checkpoint ck = load_checkpoint(path, &arch);
    return Model(std::move(ck.params));
}

std::vector<Bag> load_split(const RunConfig& rc) {
    const std::string split = rc.json().at("eval").at("split").get<std::string>();
    if (split != "train" && split != "test")
        throw usage_error("eval.split must be train or test, got " + split);
    return load_bag_dataset(rc.data_dir() / split);
}

int cmd_eval(const RunConfig& rc) {
    const fs::path out = rc.out_dir();
    Model model = load_model(rc);
    std::vector<Bag> bags = load_split(rc);
    EvalOutputs ev = run_model(model, bags, rc.train_config().pool);

    const double r2 = r_squared(ev.y, ev.yhat);
    std::vector<int> yi(ev.y.size()), yhi(ev.y.size());
    for (std::size_t i = 0; i < ev.y.size(); ++i) {
        yi[i] = int(std::lround(ev.y[i]));
        yhi[i] = int(std::lround(ev.yhat[i]));
    }
    const double exact_acc = ordinal_accuracy(yi, yhi, 0);
    const double one_off_acc = ordinal_accuracy(yi, yhi, 1);
    const SpectrumReport spec = latent_spectrum(ev.latents);

    bool have_auc = false;
    double mean_auc = 0;
    for (const auto& bag : bags)
        if (!bag.relevance.empty()) have_auc = true;
    if (have_auc) {
        AttentionRocResult roc = attention_roc(bags, ev.maps);
        mean_auc = roc.mean_auc;
        fs::create_directories(out);
        std::ofstream os(out / "roc_mean.csv");
        os << "fpr,mean_tpr,std_tpr\n";
        for (std::size_t g = 0; g < roc.grid_fpr.size(); ++g)
            os << fmt_g9(roc.grid_fpr[g]) << ',' << fmt_g9(roc.mean_tpr[g]) << ','
               << fmt_g9(roc.std_tpr[g]) << '\n';
    }

    rc.write_snapshot(out);
    std::ofstream os(out / "summary.json");
    os << "{\"r2\":" << fmt_g9(r2);
    os << ",\"mean_auc\":" << (have_auc ? fmt_g9(mean_auc) : "null");
    os << ",\"exact_acc\":" << fmt_g9(exact_acc);
    os << ",\"one_off_acc\":" << fmt_g9(one_off_acc);
    os << ",\"effective_rank\":" << fmt_g9(spec.effective_rank);
    os << ",\"sigma\":[";
    for (std::size_t k = 0; k < spec.singular_values.size(); ++k)
        os << (k ? "," : "") << fmt_g9(spec.singular_values[k]);
    os << "]}\n";
    os.close();
    append_run_log(out, "eval", rc.hash());

    std::printf("r2 %.6g", r2);
    if (have_auc) std::printf(", mean_auc %.6g", mean_auc);
    std::printf(", exact %.4g, one_off %.4g, effective_rank %.6g\n", exact_acc, one_off_acc,
                spec.effective_rank);
    return 0;
}

int cmd_attn_export(const RunConfig& rc) {
    const fs::path out = rc.out_dir();
    Model model = load_model(rc);
    std::vector<Bag> bags = load_split(rc);
    EvalOutputs ev = run_model(model, bags, rc.train_config().pool);
    fs::create_directories(out);
    export_attention_csv(out / "attention.csv", bags, ev.maps);
    export_subject_vectors(out / "subject_vectors.csv", bags, model, rc.train_config().pool);
    rc.write_snapshot(out);
    append_run_log(out, "attn-export", rc.hash());
    std::size_t rows = 0;
    for (const auto& bag : bags) rows += bag.size();
    std::printf("exported %zu attention rows, %zu subject vectors\n", rows, bags.size());
    return 0;
}

int cmd_spectrum(const RunConfig& rc) {
    const fs::path out = rc.out_dir();
    Model model = load_model(rc);
    std::vector<Bag> bags = load_split(rc);
    EvalOutputs ev = run_model(model, bags, rc.train_config().pool);
    const SpectrumReport spec = latent_spectrum(ev.latents);

    fs::create_directories(out);
    std::ofstream os(out / "spectrum.json");
    os << "{\"effective_rank\":" << fmt_g9(spec.effective_rank);
    os << ",\"threshold_rank\":" << spec.threshold_rank;
    os << ",\"sigma\":[";
    for (std::size_t k = 0; k < spec.singular_values.size(); ++k)
        os << (k ? "," : "") << fmt_g9(spec.singular_values[k]);
    os << "],\"explained_variance\":[";
    for (std::size_t k = 0; k < spec.explained_variance.size(); ++k)
        os << (k ? "," : "") << fmt_g9(spec.explained_variance[k]);
    os << "]}\n";
    os.close();
    rc.write_snapshot(out);
    append_run_log(out, "spectrum", rc.hash());
    std::printf("effective_rank %.6g (threshold rank %zu)\n", spec.effective_rank,
                spec.threshold_rank);
    return 0;
}

int cmd_ablate_lambda1(const RunConfig& rc) {
    const fs::path out = rc.out_dir();
    std::vector<double> lambdas =
        rc.json().at("ablate").at("lambda1_list").get<std::vector<double>>();
    if (lambdas.empty()) throw usage_error("ablate.lambda1_list must not be empty");
    std::sort(lambdas.begin(), lambdas.end());

    std::vector<Bag> train_bags = load_bag_dataset(rc.data_dir() / "train");
    std::vector<Bag> test_bags = load_bag_dataset(rc.data_dir() / "test");

    fs::create_directories(out);
    std::ofstream table(out / "ablate.csv");
    table << "lambda1,r2,effective_rank\n";
    for (double lam : lambdas) {
        TrainConfig tc = rc.train_config();
        tc.lambda1 = lam;
        tc.epochs = rc.json().at("ablate").at("epochs").get<std::size_t>();

        char tag[48];
        std::snprintf(tag, sizeof tag, "ablate_lam%g", lam);
        const fs::path ck_path = out / (std::string(tag) + ".ckpt");
        Model model = [&] {
            if (fs::exists(ck_path)) {
                Checkpoint ck = load_checkpoint(ck_path, &tc.arch);
                if (ck.config_hash == rc.hash()) return Model(std::move(ck.params));
            }
            TrainResult res = train(train_bags, tc);
            if (res.aborted) throw numeric_error("ablation arm diverged: " + res.abort_reason);
            Checkpoint ck;
            ck.params = res.params;
            ck.adam_m = res.opt.m;
            ck.adam_v = res.opt.v;
            ck.adam_t = res.opt.t;
            ck.has_optimizer = true;
            ck.config_hash = rc.hash();
            ck.rng_seed = rc.seed();
            save_checkpoint(ck_path, ck);
            return Model(std::move(ck.params));
        }();

        EvalOutputs ev = run_model(model, test_bags, tc.pool);
        const double r2 = r_squared(ev.y, ev.yhat);
        const double erank = latent_spectrum(ev.latents).effective_rank;
        table << fmt_g9(lam) << ',' << fmt_g9(r2) << ',' << fmt_g9(erank) << '\n';
        std::printf("lambda1 %-8g r2 %-10.6g effective_rank %.6g\n", lam, r2, erank);
    }
    table.close();
    rc.write_snapshot(out);
    append_run_log(out, "ablate-lambda1", rc.hash());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"set-of-patches regression toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--set", sets, "dotted-path override, e.g. train.lambda1=0");
    std::string out_raw;
    auto* out_opt = app.add_option("--out", out_raw, "output directory");
    std::uint64_t seed_raw = 0;
    auto* seed_opt = app.add_option("--seed", seed_raw, "top-level RNG seed");

    auto* gen = app.add_subcommand("gen-data", "generate a bag dataset");
    auto* tr = app.add_subcommand("train", "train the joint model");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    auto* ax = app.add_subcommand("attn-export", "export attention weights and subject vectors");
    auto* sp = app.add_subcommand("spectrum", "latent spectrum report");
    auto* ab = app.add_subcommand("ablate-lambda1", "train across a lambda1 grid");
    for (CLI::App* sub : {gen, tr, ev, ax, sp, ab}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (*out_opt) out = out_raw;
        if (*seed_opt) seed = seed_raw;
        const RunConfig rc = RunConfig::load(config_path, sets, out, seed);
        if (gen->parsed()) return cmd_gen_data(rc);
        if (tr->parsed()) return cmd_train(rc);
        if (ev->parsed()) return cmd_eval(rc);
        if (ax->parsed()) return cmd_attn_export(rc);
        if (sp->parsed()) return cmd_spectrum(rc);
        if (ab->parsed()) return cmd_ablate_lambda1(rc);
        return 2;
    } catch (const usage_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const domain_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const format_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const incompat_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
