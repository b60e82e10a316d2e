#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "setvec_cli_tests";

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

int run_cli(const std::string& args, std::string* output = nullptr) {
    const fs::path log = kWork / "cmd_output.txt";
    const std::string cmd =
        std::string(SETVEC_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    if (output) *output = slurp(log);
    return WEXITSTATUS(rc);
}

// shared tiny dataset so the suite stays fast
class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fs::remove_all(kWork);
        fs::create_directories(kWork);
        const int rc = run_cli("gen-data --set data.n_train=10 --set data.n_test=5"
                               " --set data.min_size=4 --set data.max_size=6"
                               " --set data.dir=" + (kWork / "ds").string() + " --seed 7");
        ASSERT_EQ(rc, 0);
    }
    static std::string ds() { return (kWork / "ds").string(); }
};

TEST_F(Cli, GenDataIsIdempotent) {
    const fs::path d2 = kWork / "ds2";
    ASSERT_EQ(run_cli("gen-data --set data.n_train=10 --set data.n_test=5"
                      " --set data.min_size=4 --set data.max_size=6"
                      " --set data.dir=" + d2.string() + " --seed 7"),
              0);
    EXPECT_EQ(slurp(kWork / "ds" / "train" / "manifest.json"),
              slurp(d2 / "train" / "manifest.json"));
    EXPECT_EQ(slurp(kWork / "ds" / "test" / "manifest.json"),
              slurp(d2 / "test" / "manifest.json"));
}

TEST_F(Cli, GenDataRejectsBadSizes) {
    std::string out;
    const int rc = run_cli("gen-data --set data.min_size=9 --set data.max_size=4"
                           " --set data.dir=" + (kWork / "bad").string(), &out);
    EXPECT_EQ(rc, 2);
    EXPECT_NE(out.find("usage error"), std::string::npos);
}

TEST_F(Cli, MissingDatasetGivesDataErrorWithHint) {
    std::string out;
    const int rc = run_cli("train --set data.dir=" + (kWork / "nowhere").string() +
                           " --out " + (kWork / "r0").string(), &out);
    EXPECT_EQ(rc, 3);
    EXPECT_NE(out.find("gen-data"), std::string::npos);  // remediation hint
}

TEST_F(Cli, TrainProducesArtifactsAndLogsUnweightedGenerative) {
    std::string out;
    const int rc = run_cli("train --set data.dir=" + ds() + " --set train.epochs=2"
                           " --set train.lambda1=0 --set train.bags_per_step=4"
                           " --out " + (kWork / "r1").string() + " --seed 7", &out);
    ASSERT_EQ(rc, 0) << out;
    EXPECT_TRUE(fs::exists(kWork / "r1" / "checkpoint.bin"));
    EXPECT_TRUE(fs::exists(kWork / "r1" / "metrics.ndjson"));
    EXPECT_TRUE(fs::exists(kWork / "r1" / "config.resolved.json"));
    const std::string metrics = slurp(kWork / "r1" / "metrics.ndjson");
    EXPECT_NE(metrics.find("\"L_g\":"), std::string::npos);
    EXPECT_EQ(metrics.find("\"L_g\":0,"), std::string::npos);  // logged with a real value
}

TEST_F(Cli, SameSeedGivesIdenticalMetrics) {
    const std::string common = "train --set data.dir=" + ds() +
                               " --set train.epochs=2 --set train.lambda1=1"
                               " --set train.bags_per_step=4 --seed 11 --out ";
    ASSERT_EQ(run_cli(common + (kWork / "r2a").string()), 0);
    ASSERT_EQ(run_cli(common + (kWork / "r2b").string()), 0);
    const std::string a = slurp(kWork / "r2a" / "metrics.ndjson");
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, slurp(kWork / "r2b" / "metrics.ndjson"));
    EXPECT_EQ(slurp(kWork / "r2a" / "checkpoint.bin"), slurp(kWork / "r2b" / "checkpoint.bin"));
}

TEST_F(Cli, ResumeContinuesStepCount) {
    const std::string base = "--set data.dir=" + ds() + " --set train.bags_per_step=5 --seed 3 ";
    ASSERT_EQ(run_cli("train " + base + "--set train.epochs=2 --out " + (kWork / "r3").string()),
              0);
    ASSERT_EQ(run_cli("train " + base + "--set train.epochs=1 --set train.resume=" +
                      (kWork / "r3" / "checkpoint.bin").string() + " --out " +
                      (kWork / "r3b").string()),
              0);
    // 10 bags / 5 per step = 2 steps per epoch: 4 after two epochs, then 6
    const std::string m = slurp(kWork / "r3b" / "metrics.ndjson");
    EXPECT_NE(m.find("\"step\":6"), std::string::npos) << m;
}

TEST_F(Cli, EvalWritesSummarySchema) {
    ASSERT_EQ(run_cli("train --set data.dir=" + ds() + " --set train.epochs=1"
                      " --out " + (kWork / "r4").string() + " --seed 7"),
              0);
    std::string out;
    ASSERT_EQ(run_cli("eval --set data.dir=" + ds() + " --out " + (kWork / "r4").string() +
                      " --seed 7", &out),
              0) << out;
    const std::string summary = slurp(kWork / "r4" / "summary.json");
    for (const char* key :
         {"\"r2\":", "\"mean_auc\":", "\"exact_acc\":", "\"one_off_acc\":",
          "\"effective_rank\":", "\"sigma\":["})
        EXPECT_NE(summary.find(key), std::string::npos) << summary;

    // idempotent re-run
    ASSERT_EQ(run_cli("eval --set data.dir=" + ds() + " --out " + (kWork / "r4").string() +
                      " --seed 7"),
              0);
    EXPECT_EQ(summary, slurp(kWork / "r4" / "summary.json"));
}

TEST_F(Cli, AttnExportRowCountMatchesBagSizes) {
    ASSERT_EQ(run_cli("attn-export --set data.dir=" + ds() + " --out " +
                      (kWork / "r4").string() + " --seed 7"),
              0);
    std::istringstream csv(slurp(kWork / "r4" / "attention.csv"));
    std::string line;
    std::getline(csv, line);  // header
    std::size_t rows = 0;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    std::size_t expected = 0;
    std::istringstream manifest(slurp(kWork / "ds" / "test" / "manifest.json"));
    while (std::getline(manifest, line)) {
        const auto pos = line.find("\"n_patches\": ");
        if (pos != std::string::npos) expected += std::stoul(line.substr(pos + 13));
    }
    EXPECT_EQ(rows, expected);
    EXPECT_TRUE(fs::exists(kWork / "r4" / "subject_vectors.csv"));
}

TEST_F(Cli, SpectrumReportWritten) {
    ASSERT_EQ(run_cli("spectrum --set data.dir=" + ds() + " --out " + (kWork / "r4").string() +
                      " --seed 7"),
              0);
    const std::string spec = slurp(kWork / "r4" / "spectrum.json");
    EXPECT_NE(spec.find("\"effective_rank\":"), std::string::npos);
    EXPECT_NE(spec.find("\"sigma\":["), std::string::npos);
}

TEST_F(Cli, AblateSingleArmAndSortedRows) {
    std::string out;
    ASSERT_EQ(run_cli("ablate-lambda1 --set data.dir=" + ds() +
                      " --set ablate.lambda1_list=[0] --set ablate.epochs=1 --out " +
                      (kWork / "r5").string() + " --seed 7", &out),
              0) << out;
    std::istringstream csv(slurp(kWork / "r5" / "ablate.csv"));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "lambda1,r2,effective_rank");
    std::size_t rows = 0;
    double prev = -1;
    while (std::getline(csv, line))
        if (!line.empty()) {
            ++rows;
            const double lam = std::stod(line.substr(0, line.find(',')));
            EXPECT_GT(lam, prev);
            prev = lam;
        }
    EXPECT_EQ(rows, 1u);
}

TEST_F(Cli, AblateEmptyListIsUsageError) {
    std::string out;
    EXPECT_EQ(run_cli("ablate-lambda1 --set data.dir=" + ds() +
                      " --set ablate.lambda1_list=[] --out " + (kWork / "r6").string(), &out),
              2);
}

TEST_F(Cli, IncompatibleCheckpointIsDataError) {
    std::string out;
    const int rc = run_cli("eval --set data.dir=" + ds() + " --set model.input=3d"
                           " --set model.batchnorm=true"
                           " --set eval.checkpoint=" + (kWork / "r4" / "checkpoint.bin").string() +
                           " --out " + (kWork / "r7").string(), &out);
    EXPECT_EQ(rc, 3);
    EXPECT_NE(out.find("architecture"), std::string::npos);
}

TEST_F(Cli, NumericAbortExitsFour) {
    std::string out;
    const int rc = run_cli("train --set data.dir=" + ds() + " --set train.epochs=2"
                           " --set train.learning_rate=1e200 --out " + (kWork / "r8").string() +
                           " --seed 7", &out);
    EXPECT_EQ(rc, 4) << out;
    EXPECT_TRUE(fs::exists(kWork / "r8" / "checkpoint.bin"));  // last good retained
}

TEST_F(Cli, UnknownConfigKeyIsUsageError) {
    std::string out;
    EXPECT_EQ(run_cli("train --set train.learning_rte=0.1 --out " + (kWork / "r9").string(), &out),
              2);
    EXPECT_NE(out.find("unknown config key"), std::string::npos);
}

}  // namespace
