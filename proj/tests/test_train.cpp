#include "setvec/train.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "setvec/checkpoint.hpp"
#include "setvec/data.hpp"

using namespace setvec;

namespace {

ModelConfig small2d() {
    ModelConfig cfg;
    cfg.input = InputKind::image2d;
    return cfg;
}

std::vector<Bag> tiny_digit_bags(std::size_t n_bags, std::uint64_t seed) {
    DigitDataset ds = make_digit_dataset(seed, 80);
    return make_bags(ds, seed + 1, n_bags, 3, 5);
}

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.arch = small2d();
    cfg.epochs = 2;
    cfg.bags_per_step = 4;
    cfg.lambda1 = 1.0;
    cfg.lambda2 = 0.01;
    cfg.val_fraction = 0.0;
    cfg.threads = 2;
    return cfg;
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
    bool same = a.cfg == b.cfg;
    for_each_persistent(const_cast<ModelParams&>(a), [&](const char* name, Tensor& ta) {
        for_each_persistent(const_cast<ModelParams&>(b), [&](const char* nb, Tensor& tb) {
            if (std::strcmp(name, nb) == 0 && !(ta == tb)) same = false;
        });
    });
    return same;
}

}  // namespace

// --- Adam ---

TEST(Adam, FirstStepMatchesHandComputation) {
    ModelParams p = zeros_like(make_model_params<double>(small2d(), 1));
    ModelParams g = zeros_like(p);
    g.pred_b[0] = 1.0;
    OptimizerState st = make_optimizer_state(p);
    TrainConfig cfg = tiny_train_config();
    adam_step(p, g, st, cfg);
    // m_hat = 1, v_hat = 1: update = -lr / (1 + eps_adam)
    EXPECT_NEAR(p.pred_b[0], -0.001 / (1.0 + 1e-8), 1e-15);
    EXPECT_NEAR(p.pred_b[0], -0.000999999990, 1e-12);
    EXPECT_EQ(st.t, 1u);
    EXPECT_EQ(p.pred_w[0], 0.0);  // untouched coordinates stay put
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
    ModelParams p = make_model_params<double>(small2d(), 3);
    ModelParams copy = p;
    ModelParams g = zeros_like(p);
    OptimizerState st = make_optimizer_state(p);
    TrainConfig cfg = tiny_train_config();
    adam_step(p, g, st, cfg);
    EXPECT_TRUE(params_equal(p, copy));
    EXPECT_EQ(st.t, 1u);
}

TEST(Adam, StateCarriesAcrossSteps) {
    // two-step hand computation with gradients (1, 0); statefulness shows as
    // a second update despite the zero gradient
    ModelParams p = zeros_like(make_model_params<double>(small2d(), 1));
    ModelParams g = zeros_like(p);
    OptimizerState st = make_optimizer_state(p);
    TrainConfig cfg = tiny_train_config();
    g.pred_b[0] = 1.0;
    adam_step(p, g, st, cfg);
    const double after1 = p.pred_b[0];
    g.pred_b[0] = 0.0;
    adam_step(p, g, st, cfg);
    // m2 = 0.09, m2_hat = 0.09/0.19; v2 = 0.000999, v2_hat = 0.000999/0.001999
    const double m2hat = 0.09 / 0.19;
    const double v2hat = 0.000999 / 0.001999;
    const double expect2 = after1 - 0.001 * m2hat / (std::sqrt(v2hat) + 1e-8);
    EXPECT_NEAR(p.pred_b[0], expect2, 1e-15);

    // a single doubled-lr step from scratch lands elsewhere
    ModelParams q = zeros_like(make_model_params<double>(small2d(), 1));
    ModelParams g2 = zeros_like(q);
    g2.pred_b[0] = 1.0;
    OptimizerState st2 = make_optimizer_state(q);
    TrainConfig doubled = cfg;
    doubled.learning_rate = 0.002;
    adam_step(q, g2, st2, doubled);
    EXPECT_NE(q.pred_b[0], p.pred_b[0]);
}

TEST(Adam, NonFiniteGradientNamesGroup) {
    ModelParams p = make_model_params<double>(small2d(), 4);
    ModelParams g = zeros_like(p);
    g.att_w1[0] = std::numeric_limits<double>::infinity();
    OptimizerState st = make_optimizer_state(p);
    try {
        adam_step(p, g, st, tiny_train_config());
        FAIL() << "expected numeric_error";
    } catch (const numeric_error& e) {
        EXPECT_NE(std::string(e.what()).find("att.w1"), std::string::npos);
    }
}

// --- training loop ---

TEST(Train, ValidatesConfig) {
    TrainConfig cfg = tiny_train_config();
    cfg.learning_rate = 0.0;
    EXPECT_THROW(cfg.validate(), usage_error);
    cfg = tiny_train_config();
    cfg.beta1 = 1.0;
    EXPECT_THROW(cfg.validate(), usage_error);
    cfg = tiny_train_config();
    EXPECT_THROW(train(std::vector<Bag>{}, cfg), domain_error);
}

TEST(Train, ZeroGradientLandscapeOnlyAdvancesStepCount) {
    // all-zero targets, zero-initialized params, lambdas zero
    std::vector<Bag> bags(6);
    for (auto& bag : bags) {
        bag.patches.assign(3, Tensor({1, 28, 28}));
        bag.y = 0.0;
    }
    TrainConfig cfg = tiny_train_config();
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    cfg.epochs = 1;
    cfg.standardize_targets = false;

    Checkpoint zero_start;
    zero_start.params = zeros_like(make_model_params<double>(cfg.arch, 1));
    zero_start.adam_m = zeros_like(zero_start.params);
    zero_start.adam_v = zeros_like(zero_start.params);
    zero_start.has_optimizer = true;

    TrainResult res = train(bags, cfg, nullptr, &zero_start);
    EXPECT_FALSE(res.aborted);
    EXPECT_TRUE(params_equal(res.params, zero_start.params));
    EXPECT_EQ(res.opt.t, 2u);  // ceil(6/4) steps
}

TEST(Train, DeterministicForFixedSeed) {
    auto bags = tiny_digit_bags(10, 60);
    TrainConfig cfg = tiny_train_config();
    TrainResult a = train(bags, cfg);
    TrainResult b = train(bags, cfg);
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i)
        EXPECT_EQ(a.log[i].to_json_line(), b.log[i].to_json_line());
    EXPECT_TRUE(params_equal(a.params, b.params));

    TrainConfig other = cfg;
    other.rng_seed = cfg.rng_seed + 1;
    TrainResult c = train(bags, other);
    EXPECT_FALSE(params_equal(a.params, c.params));
}

TEST(Train, LogsAllTermsIncludingUnweightedGenerative) {
    auto bags = tiny_digit_bags(8, 61);
    TrainConfig cfg = tiny_train_config();
    cfg.lambda1 = 0.0;  // L_g still logged
    cfg.epochs = 1;
    TrainResult res = train(bags, cfg);
    ASSERT_EQ(res.log.size(), 1u);
    EXPECT_GT(res.log[0].L_g, 0.0);
    EXPECT_TRUE(std::isfinite(res.log[0].total));
    // objective audit: total = L_d + l1*L_g + l2*R for the epoch means
    const auto& r = res.log[0];
    EXPECT_NEAR(r.total, r.L_d + cfg.lambda1 * r.L_g + cfg.lambda2 * r.R,
                1e-12 * std::max(1.0, std::abs(r.total)));
}

TEST(Train, ValidationR2Logged) {
    auto bags = tiny_digit_bags(20, 62);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    cfg.val_fraction = 0.2;
    TrainResult res = train(bags, cfg);
    ASSERT_EQ(res.log.size(), 1u);
    ASSERT_TRUE(res.log[0].val_r2.has_value());
    EXPECT_LE(*res.log[0].val_r2, 1.0);
}

TEST(Train, AbortsOnNonFiniteLossKeepingLastGood) {
    auto bags = tiny_digit_bags(6, 63);
    bags[2].patches[0][5] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    TrainResult res = train(bags, cfg);
    EXPECT_TRUE(res.aborted);
    EXPECT_FALSE(res.abort_reason.empty());
    // last good state is the seeded initialization (abort in epoch 0)
    ModelParams init = make_model_params<double>(cfg.arch, cfg.rng_seed);
    init.target_affine = res.params.target_affine;
    EXPECT_TRUE(params_equal(res.params, init));
}

TEST(Train, ThreadCountDoesNotChangeResult) {
    auto bags = tiny_digit_bags(8, 64);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    cfg.threads = 1;
    TrainResult a = train(bags, cfg);
    cfg.threads = 2;
    TrainResult b = train(bags, cfg);
    EXPECT_TRUE(params_equal(a.params, b.params));
}

TEST(Train, SmoothedLossDecreasesOverEarlyEpochs) {
    auto bags = tiny_digit_bags(24, 65);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 3;
    cfg.lambda1 = 1.0;
    TrainResult res = train(bags, cfg);
    ASSERT_EQ(res.log.size(), 3u);
    EXPECT_LE(res.log[2].total, res.log[0].total);
}

// --- checkpointing ---

TEST(Checkpoint, RoundTripIsBitExact) {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "setvec_test.ckpt";
    auto bags = tiny_digit_bags(8, 66);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    TrainResult res = train(bags, cfg);

    Checkpoint ck;
    ck.params = res.params;
    ck.adam_m = res.opt.m;
    ck.adam_v = res.opt.v;
    ck.adam_t = res.opt.t;
    ck.has_optimizer = true;
    ck.config_hash = 0xdeadbeefcafef00dULL;
    ck.rng_seed = cfg.rng_seed;
    save_checkpoint(path, ck);

    Checkpoint loaded = load_checkpoint(path, &cfg.arch);
    EXPECT_TRUE(params_equal(loaded.params, ck.params));
    EXPECT_TRUE(params_equal(loaded.adam_m, ck.adam_m));
    EXPECT_TRUE(params_equal(loaded.adam_v, ck.adam_v));
    EXPECT_EQ(loaded.adam_t, ck.adam_t);
    EXPECT_EQ(loaded.config_hash, ck.config_hash);
    EXPECT_EQ(loaded.rng_seed, ck.rng_seed);
    fs::remove(path);
}

TEST(Checkpoint, TamperedByteIsRejected) {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "setvec_tamper.ckpt";
    Checkpoint ck;
    ck.params = make_model_params<double>(small2d(), 9);
    ck.adam_m = zeros_like(ck.params);
    ck.adam_v = zeros_like(ck.params);
    save_checkpoint(path, ck);

    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char byte;
    f.seekg(200);
    f.get(byte);
    f.seekp(200);
    byte = char(byte ^ 0x40);
    f.put(byte);
    f.close();
    EXPECT_THROW(load_checkpoint(path), format_error);
    fs::remove(path);
}

TEST(Checkpoint, ArchitectureMismatchIsIncompatible) {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "setvec_arch.ckpt";
    Checkpoint ck;
    ck.params = make_model_params<double>(small2d(), 9);
    ck.adam_m = zeros_like(ck.params);
    ck.adam_v = zeros_like(ck.params);
    save_checkpoint(path, ck);

    ModelConfig cfg3d;
    cfg3d.input = InputKind::volume3d;
    cfg3d.batchnorm = true;
    EXPECT_THROW(load_checkpoint(path, &cfg3d), incompat_error);
    fs::remove(path);
}

TEST(Checkpoint, UnsupportedVersionIsIncompatible) {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "setvec_ver.ckpt";
    Checkpoint ck;
    ck.params = make_model_params<double>(small2d(), 9);
    ck.adam_m = zeros_like(ck.params);
    ck.adam_v = zeros_like(ck.params);
    save_checkpoint(path, ck);

    // bump the version field and refresh the trailing crc so only the
    // version check can fail
    std::ifstream in(path, std::ios::binary);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    in.close();
    buf[4] = 99;
    const std::uint32_t crc = crc32_final(crc32(buf.data() + 4, buf.size() - 8));
    std::memcpy(buf.data() + buf.size() - 4, &crc, 4);
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    out.close();
    EXPECT_THROW(load_checkpoint(path), incompat_error);
    fs::remove(path);
}

TEST(Train, ResumeContinuesStepCountMonotonically) {
    auto bags = tiny_digit_bags(8, 67);
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 2;
    TrainResult first = train(bags, cfg);
    const std::uint64_t t1 = first.opt.t;

    Checkpoint ck;
    ck.params = first.params;
    ck.adam_m = first.opt.m;
    ck.adam_v = first.opt.v;
    ck.adam_t = first.opt.t;
    ck.has_optimizer = true;

    TrainConfig more = cfg;
    more.epochs = 1;
    TrainResult second = train(bags, more, nullptr, &ck);
    EXPECT_EQ(second.opt.t, t1 + 2u);  // one more epoch = ceil(8/4) steps
    EXPECT_EQ(second.log[0].step, t1 + 2u);
}

TEST(Metrics, NdjsonLinesAreStable) {
    MetricsRecord rec;
    rec.epoch = 3;
    rec.step = 42;
    rec.L_d = 1.5;
    rec.L_g = 0.25;
    rec.R = -5.5;
    rec.total = 1.5 + 0.25 - 5.5;
    EXPECT_EQ(rec.to_json_line(),
              "{\"epoch\":3,\"step\":42,\"L_d\":1.5,\"L_g\":0.25,\"R\":-5.5,\"total\":-3.75}");
    rec.val_r2 = 0.5;
    EXPECT_NE(rec.to_json_line().find("\"val_r2\":0.5"), std::string::npos);
}
