#include "setvec/eval.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "setvec/rng.hpp"

using namespace setvec;

// --- R^2 ---

TEST(RSquared, ExactAndConstantPredictions) {
    std::vector<double> y{1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(r_squared(y, y), 1.0);
    std::vector<double> mean_pred(4, 2.5);
    EXPECT_DOUBLE_EQ(r_squared(y, mean_pred), 0.0);
}

TEST(RSquared, DirectSums) {
    std::vector<double> y{0, 1, 2}, yhat{0, 1, 1};
    EXPECT_DOUBLE_EQ(r_squared(y, yhat), 0.5);  // 1 - 1/2
}

TEST(RSquared, ConstantTargetsAreDomainError) {
    std::vector<double> y{2, 2, 2}, yhat{1, 2, 3};
    EXPECT_THROW(r_squared(y, yhat), domain_error);
    EXPECT_THROW(r_squared({1.0}, {1.0}), domain_error);
}

TEST(RSquared, NeverExceedsOne) {
    Rng rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> y(10), yhat(10);
        for (int i = 0; i < 10; ++i) {
            y[i] = rng.uniform(-5, 5);
            yhat[i] = rng.uniform(-5, 5);
        }
        EXPECT_LE(r_squared(y, yhat), 1.0);
    }
}

// --- ordinal accuracy ---

TEST(OrdinalAccuracy, SpecCases) {
    EXPECT_DOUBLE_EQ(ordinal_accuracy({1, 2, 3}, {1, 2, 3}, 0), 1.0);
    EXPECT_DOUBLE_EQ(ordinal_accuracy({0, 2}, {1, 3}, 1), 1.0);
    EXPECT_NEAR(ordinal_accuracy({0, 2, 4}, {2, 2, 2}, 1), 1.0 / 3.0, 1e-15);
}

// --- ROC / AUC ---

TEST(Roc, PerfectOrderingGivesUnitAuc) {
    std::vector<double> scores{0.9, 0.8, 0.2, 0.1};
    std::vector<std::uint8_t> labels{1, 1, 0, 0};
    EXPECT_DOUBLE_EQ(roc_from_scores(scores, labels).auc, 1.0);
    EXPECT_DOUBLE_EQ(pairwise_auc(scores, labels), 1.0);
}

TEST(Roc, AllTiedGivesHalfExactly) {
    std::vector<double> scores{0.25, 0.25, 0.25, 0.25};
    std::vector<std::uint8_t> labels{1, 0, 1, 0};
    EXPECT_DOUBLE_EQ(roc_from_scores(scores, labels).auc, 0.5);
    EXPECT_DOUBLE_EQ(pairwise_auc(scores, labels), 0.5);
}

TEST(Roc, BruteForcePairExample) {
    std::vector<double> scores{0.4, 0.3, 0.2, 0.1};
    std::vector<std::uint8_t> labels{1, 0, 1, 0};
    EXPECT_DOUBLE_EQ(pairwise_auc(scores, labels), 0.75);
    EXPECT_NEAR(roc_from_scores(scores, labels).auc, 0.75, 1e-12);
}

TEST(Roc, NeedsBothClasses) {
    std::vector<double> scores{0.4, 0.3};
    EXPECT_THROW(roc_from_scores(scores, {1, 1}), domain_error);
    EXPECT_THROW(pairwise_auc(scores, {0, 0}), domain_error);
}

TEST(Roc, CurveIsMonotoneAndAnchored) {
    Rng rng(2);
    std::vector<double> scores(30);
    std::vector<std::uint8_t> labels(30);
    for (int i = 0; i < 30; ++i) {
        scores[i] = rng.uniform(0, 1);
        labels[i] = rng.uniform() < 0.4 ? 1 : 0;
    }
    labels[0] = 1;
    labels[1] = 0;
    RocCurve roc = roc_from_scores(scores, labels);
    EXPECT_DOUBLE_EQ(roc.fpr.front(), 0.0);
    EXPECT_DOUBLE_EQ(roc.tpr.front(), 0.0);
    EXPECT_DOUBLE_EQ(roc.fpr.back(), 1.0);
    EXPECT_DOUBLE_EQ(roc.tpr.back(), 1.0);
    for (std::size_t k = 1; k < roc.fpr.size(); ++k) {
        EXPECT_GE(roc.fpr[k], roc.fpr[k - 1]);
        EXPECT_GE(roc.tpr[k], roc.tpr[k - 1]);
    }
}

// The two AUC routes are independent computations; they must agree on random
// fixtures, ties included.
TEST(Roc, TrapezoidEqualsPairwiseOnRandomFixtures) {
    Rng rng(3);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t n = 5 + rng.index(40);
        std::vector<double> scores(n);
        std::vector<std::uint8_t> labels(n);
        bool has_pos = false, has_neg = false;
        for (std::size_t i = 0; i < n; ++i) {
            // quantized scores force ties
            scores[i] = double(rng.index(6)) / 5.0;
            labels[i] = rng.uniform() < 0.5 ? 1 : 0;
            (labels[i] ? has_pos : has_neg) = true;
        }
        if (!has_pos) labels[0] = 1;
        if (!has_neg) labels[n - 1] = 0;
        const double trap = roc_from_scores(scores, labels).auc;
        const double pair = pairwise_auc(scores, labels);
        EXPECT_NEAR(trap, pair, 1e-9);
    }
}

TEST(AttentionRoc, AveragesAndSkipsDegenerateBags) {
    std::vector<Bag> bags(3);
    std::vector<AttentionMap> maps(3);
    // bag 0: perfectly ranked
    bags[0].patches.resize(4);
    bags[0].relevance = {1, 1, 0, 0};
    maps[0].weights = Tensor::from({4}, {0.4, 0.3, 0.2, 0.1});
    // bag 1: inverted
    bags[1].patches.resize(4);
    bags[1].relevance = {0, 0, 1, 1};
    maps[1].weights = Tensor::from({4}, {0.4, 0.3, 0.2, 0.1});
    // bag 2: all relevant -> skipped
    bags[2].patches.resize(2);
    bags[2].relevance = {1, 1};
    maps[2].weights = Tensor::from({2}, {0.5, 0.5});

    AttentionRocResult res = attention_roc(bags, maps);
    EXPECT_EQ(res.skipped, 1u);
    EXPECT_EQ(res.per_bag.size(), 2u);
    EXPECT_DOUBLE_EQ(res.mean_auc, 0.5);  // (1.0 + 0.0) / 2
    EXPECT_EQ(res.grid_fpr.size(), 101u);
    // perfect bag reaches TPR 1 at FPR 0, inverted bag stays at 0
    EXPECT_DOUBLE_EQ(res.mean_tpr.front(), 0.5);
    EXPECT_DOUBLE_EQ(res.mean_tpr.back(), 1.0);
}

TEST(AttentionRoc, NoScoreableBagIsDomainError) {
    std::vector<Bag> bags(1);
    std::vector<AttentionMap> maps(1);
    bags[0].patches.resize(2);
    bags[0].relevance = {1, 1};
    maps[0].weights = Tensor::from({2}, {0.5, 0.5});
    EXPECT_THROW(attention_roc(bags, maps), domain_error);
}

TEST(AttentionRoc, SeededRandomWeightsSitAtChance) {
    Rng rng(Rng::derive(42, "random-baseline"));
    std::vector<Bag> bags;
    std::vector<AttentionMap> maps;
    for (int b = 0; b < 250; ++b) {
        const std::size_t n = 20 + rng.index(31);
        Bag bag;
        bag.patches.resize(n);
        bag.relevance.resize(n);
        bool pos = false, neg = false;
        for (std::size_t j = 0; j < n; ++j) {
            bag.relevance[j] = rng.uniform() < 0.4 ? 1 : 0;
            (bag.relevance[j] ? pos : neg) = true;
        }
        if (!pos) bag.relevance[0] = 1;
        if (!neg) bag.relevance[n - 1] = 0;
        AttentionMap map;
        map.weights = Tensor({n});
        double sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            map.weights[j] = rng.uniform(0.0, 1.0);
            sum += map.weights[j];
        }
        for (std::size_t j = 0; j < n; ++j) map.weights[j] /= sum;
        bags.push_back(std::move(bag));
        maps.push_back(std::move(map));
    }
    AttentionRocResult res = attention_roc(bags, maps);
    EXPECT_GE(res.mean_auc, 0.45);
    EXPECT_LE(res.mean_auc, 0.55);
}

// --- latent spectrum ---

TEST(Spectrum, RankOneMatrix) {
    Rng rng(4);
    Tensor H({8, 5});
    std::vector<double> u(5);
    for (auto& v : u) v = rng.uniform(-1, 1);
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 5; ++c) H(r, c) = double(r + 1) * u[c];
    SpectrumReport rep = latent_spectrum(H);
    EXPECT_NEAR(rep.effective_rank, 1.0, 1e-6);
    EXPECT_EQ(rep.threshold_rank, 1u);
}

TEST(Spectrum, EqualSingularValuesGiveExactRank) {
    Tensor H = Tensor::from({4, 2}, {1, 0, -1, 0, 0, 1, 0, -1});
    SpectrumReport rep = latent_spectrum(H);
    EXPECT_NEAR(rep.effective_rank, 2.0, 1e-9);
    EXPECT_NEAR(rep.singular_values[0], rep.singular_values[1], 1e-12);
}

TEST(Spectrum, EntropyOfTwoOneOne) {
    // sigma ratios (2,1,1): effective rank = exp(H(0.5,0.25,0.25)) = 2*sqrt(2)
    Tensor H({6, 3});
    const double a = 2, b = 1, c = 1;
    H(std::size_t{0}, std::size_t{0}) = a;
    H(std::size_t{1}, std::size_t{0}) = -a;
    H(std::size_t{2}, std::size_t{1}) = b;
    H(std::size_t{3}, std::size_t{1}) = -b;
    H(std::size_t{4}, std::size_t{2}) = c;
    H(std::size_t{5}, std::size_t{2}) = -c;
    SpectrumReport rep = latent_spectrum(H);
    EXPECT_NEAR(rep.effective_rank, 2.8284271247461903, 1e-9);
}

TEST(Spectrum, SingularValuesSortedAndNonNegative) {
    Rng rng(5);
    Tensor H({30, 6});
    for (std::size_t i = 0; i < H.size(); ++i) H[i] = rng.uniform(-2, 2);
    SpectrumReport rep = latent_spectrum(H);
    for (std::size_t k = 0; k < rep.singular_values.size(); ++k) {
        EXPECT_GE(rep.singular_values[k], 0.0);
        if (k) EXPECT_LE(rep.singular_values[k], rep.singular_values[k - 1]);
    }
    EXPECT_GE(rep.effective_rank, 1.0);
    EXPECT_LE(rep.effective_rank, 6.0 + 1e-9);
}

TEST(Spectrum, InvariantToRowPermutationAndRotation) {
    Rng rng(6);
    Tensor H({40, 4});
    for (std::size_t i = 0; i < H.size(); ++i) H[i] = rng.uniform(-1, 1);
    const double er = latent_spectrum(H).effective_rank;

    // row permutation
    Tensor Hp = H;
    for (std::size_t r = 0; r < 40; ++r) {
        const std::size_t q = (r * 17 + 5) % 40;
        for (std::size_t c = 0; c < 4; ++c) Hp(r, c) = H(q, c);
    }
    EXPECT_NEAR(latent_spectrum(Hp).effective_rank, er, 1e-9);

    // orthogonal rotation of the columns (Gram-Schmidt of a random matrix)
    double Q[4][4];
    for (auto& row : Q)
        for (auto& v : row) v = rng.uniform(-1, 1);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < i; ++j) {
            double dp = 0;
            for (int k = 0; k < 4; ++k) dp += Q[i][k] * Q[j][k];
            for (int k = 0; k < 4; ++k) Q[i][k] -= dp * Q[j][k];
        }
        double norm = 0;
        for (int k = 0; k < 4; ++k) norm += Q[i][k] * Q[i][k];
        norm = std::sqrt(norm);
        for (int k = 0; k < 4; ++k) Q[i][k] /= norm;
    }
    Tensor Hr({40, 4});
    for (std::size_t r = 0; r < 40; ++r)
        for (int i = 0; i < 4; ++i) {
            double acc = 0;
            for (int k = 0; k < 4; ++k) acc += H(r, std::size_t(k)) * Q[i][k];
            Hr(r, std::size_t(i)) = acc;
        }
    EXPECT_NEAR(latent_spectrum(Hr).effective_rank, er, 1e-9);
}

// --- exports ---

TEST(Exports, SinglePatchBagRow) {
    Bag bag;
    bag.subject_id = "s-1";
    bag.patches.resize(1);
    AttentionMap map;
    map.weights = Tensor::from({1}, {1.0});
    std::ostringstream os;
    export_attention(bag, map, os);
    EXPECT_EQ(os.str(), "s-1,0,,,,1\n");
}

TEST(Exports, LengthMismatchIsUsageError) {
    Bag bag;
    bag.patches.resize(2);
    AttentionMap map;
    map.weights = Tensor::from({3}, {0.5, 0.3, 0.2});
    std::ostringstream os;
    EXPECT_THROW(export_attention(bag, map, os), usage_error);
}

TEST(Exports, CsvDeterministicAndNormalized) {
    namespace fs = std::filesystem;
    const fs::path p1 = fs::temp_directory_path() / "attn_a.csv";
    const fs::path p2 = fs::temp_directory_path() / "attn_b.csv";

    Rng rng(7);
    std::vector<Bag> bags(3);
    std::vector<AttentionMap> maps(3);
    for (int b = 0; b < 3; ++b) {
        const std::size_t n = 2 + rng.index(4);
        bags[b].subject_id = "sub-" + std::to_string(b);
        bags[b].patches.resize(n);
        for (std::size_t j = 0; j < n; ++j)
            bags[b].coordinates.push_back({std::int64_t(j), 0, std::int64_t(2 * j)});
        Tensor raw({n});
        for (std::size_t j = 0; j < n; ++j) raw[j] = rng.uniform(-1, 1);
        maps[b].weights = softmax(raw);
    }
    export_attention_csv(p1, bags, maps);
    export_attention_csv(p2, bags, maps);

    std::ifstream f1(p1), f2(p2);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(s1, s2);
    EXPECT_NE(s1.find("subject_id,patch_index,coord_z,coord_y,coord_x,alpha\n"),
              std::string::npos);

    // per-subject alpha sums parse back to ~1
    std::istringstream is(s1);
    std::string line;
    std::getline(is, line);  // header
    std::map<std::string, double> sums;
    while (std::getline(is, line)) {
        const auto first = line.find(',');
        const auto last = line.rfind(',');
        sums[line.substr(0, first)] += std::stod(line.substr(last + 1));
    }
    for (const auto& [id, sum] : sums) EXPECT_NEAR(sum, 1.0, 5e-9) << id;
    fs::remove(p1);
    fs::remove(p2);
}

TEST(Exports, Format9SignificantDigits) {
    EXPECT_EQ(fmt_g9(1.0 / 3.0), "0.333333333");
    EXPECT_EQ(fmt_g9(1.0), "1");
    EXPECT_EQ(fmt_g9(123456789.123), "123456789");
}
