#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "loramix/errors.hpp"
#include "loramix/workbench.hpp"

using namespace loramix;

namespace {

DomainSpec small_spec(DomainRule rule, std::size_t seq_len = 3) {
    DomainSpec s;
    s.rule = rule;
    s.seq_len = seq_len;
    s.band_offset = 0;
    s.band_width = 4;
    return s;
}

/// Bag-of-tokens logistic regression; returns held-out accuracy.
double bag_probe(const std::vector<LabeledSample> &train, const std::vector<LabeledSample> &test, std::size_t vocab) {
    auto features = [&](const LabeledSample &s) {
        std::vector<double> f(vocab + 1, 0.0);
        for (int t : s.tokens) f[static_cast<std::size_t>(t)] += 1.0 / static_cast<double>(s.tokens.size());
        f[vocab] = 1.0;
        return f;
    };
    std::vector<double> w(vocab + 1, 0.0);
    for (int epoch = 0; epoch < 400; ++epoch) {
        std::vector<double> g(w.size(), 0.0);
        for (const auto &s : train) {
            auto f = features(s);
            double z = 0;
            for (std::size_t i = 0; i < f.size(); ++i) z += w[i] * f[i];
            const double err = 1.0 / (1.0 + std::exp(-z)) - s.label;
            for (std::size_t i = 0; i < f.size(); ++i) g[i] += err * f[i] / static_cast<double>(train.size());
        }
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 5.0 * g[i];
    }
    std::size_t right = 0;
    for (const auto &s : test) {
        auto f = features(s);
        double z = 0;
        for (std::size_t i = 0; i < f.size(); ++i) z += w[i] * f[i];
        right += (z > 0 ? 1 : 0) == s.label;
    }
    return static_cast<double>(right) / static_cast<double>(test.size());
}

}  // namespace

TEST_CASE("rule labels") {
    std::vector<int> t{1, 2, 3};
    CHECK(apply_rule(small_spec(DomainRule::token_sum_parity), t) == 0);
    std::vector<int> odd{1, 2, 2};
    CHECK(apply_rule(small_spec(DomainRule::token_sum_parity), odd) == 1);
    std::vector<int> many_high{3, 2, 0};
    CHECK(apply_rule(small_spec(DomainRule::majority_class), many_high) == 1);
    CHECK(apply_rule(small_spec(DomainRule::first_token_copy), many_high) == 1);
    std::vector<int> low_first{0, 3, 3};
    CHECK(apply_rule(small_spec(DomainRule::first_token_copy), low_first) == 0);
    auto mp = small_spec(DomainRule::max_position, 4);
    std::vector<int> early{3, 0, 1, 2};
    std::vector<int> late{0, 1, 2, 3};
    CHECK(apply_rule(mp, early) == 1);
    CHECK(apply_rule(mp, late) == 0);

    std::vector<int> outside{1, 2, 9};
    CHECK_THROWS_AS(apply_rule(small_spec(DomainRule::token_sum_parity), outside), DomainError);
    std::vector<int> short_seq{1, 2};
    CHECK_THROWS_AS(apply_rule(small_spec(DomainRule::token_sum_parity), short_seq), DimensionError);
}

TEST_CASE("default domains use disjoint bands") {
    auto specs = default_domain_specs(7);
    REQUIRE(specs.size() == 4);
    std::set<DomainRule> rules;
    for (std::size_t d = 0; d < 4; ++d) {
        CHECK(specs[d].band_offset == 4 * d);
        rules.insert(specs[d].rule);
        specs[d].validate();
    }
    CHECK(rules.size() == 4);
}

TEST_CASE("dataset generation") {
    auto specs = default_domain_specs(3);
    auto data = generate_dataset(specs, 1000, 11);
    CHECK(data.train.size() == 3200);
    CHECK(data.val.size() == 400);
    CHECK(data.test.size() == 400);
    std::set<std::vector<int>> all;
    for (auto *split : {&data.train, &data.val, &data.test})
        for (const auto &s : *split) {
            CHECK(apply_rule(specs[static_cast<std::size_t>(s.domain_id)], s.tokens) == s.label);
            all.insert(s.tokens);
        }
    CHECK(all.size() == 4000);
    for (int d = 0; d < 4; ++d) {
        auto dom = filter_domain(data.train, d);
        double ones = 0;
        for (const auto &s : dom) ones += s.label;
        const double frac = ones / static_cast<double>(dom.size());
        CHECK(frac >= 0.45);
        CHECK(frac <= 0.55);
    }
    auto again = generate_dataset(specs, 1000, 11);
    CHECK(again.train == data.train);
    CHECK(again.test == data.test);
    auto other = generate_dataset(specs, 1000, 12);
    CHECK_FALSE(other.train == data.train);
}

TEST_CASE("dataset spec errors") {
    auto specs = default_domain_specs(1);
    CHECK_THROWS_AS(generate_dataset(specs, 5, 1), SpecError);
    CHECK_THROWS_AS(generate_dataset({}, 100, 1), SpecError);
    auto dup = specs;
    dup[1].rule = dup[0].rule;
    CHECK_THROWS_AS(generate_dataset(dup, 100, 1), SpecError);
    auto wide = specs;
    wide[3].band_width = 8;
    CHECK_THROWS_AS(generate_dataset(wide, 100, 1), SpecError);
    // Three tokens from a two-value band cannot give 500 distinct samples.
    DomainSpec tiny = small_spec(DomainRule::first_token_copy);
    tiny.band_width = 2;
    CHECK_THROWS_AS(generate_dataset({tiny}, 500, 1), SpecError);
    CHECK_THROWS_AS(parse_domain_rule("xor"), SpecError);
}

TEST_CASE("a bag-of-tokens probe fails on at least one domain") {
    auto data = generate_dataset(default_domain_specs(5), 400, 2);
    double worst = 1.0;
    for (int d = 0; d < 4; ++d)
        worst = std::min(worst, bag_probe(filter_domain(data.train, d), filter_domain(data.test, d), 16));
    CHECK(worst < 0.75);
}

TEST_CASE("mixed stream proportions") {
    auto data = generate_dataset(default_domain_specs(2), 200, 3);
    SUBCASE("one-hot") {
        MixedStream s(data.train, {0.0, 0.0, 1.0, 0.0}, 5);
        for (int i = 0; i < 10; ++i)
            for (int d : s.next(16).domains) CHECK(d == 2);
    }
    SUBCASE("uniform counts") {
        MixedStream s(data.train, uniform_proportions(4), 6);
        std::map<int, int> counts;
        for (const auto &x : s.draw(1000)) counts[x.domain_id]++;
        for (int d = 0; d < 4; ++d) {
            CHECK(counts[d] >= 250 - 35);
            CHECK(counts[d] <= 250 + 35);
        }
    }
    SUBCASE("deterministic") {
        MixedStream a(data.train, uniform_proportions(4), 9), b(data.train, uniform_proportions(4), 9);
        CHECK(a.draw(300) == b.draw(300));
    }
    SUBCASE("sample limit cycles a fixed pool") {
        MixedStream s(data.train, uniform_proportions(4), 9, 20);
        auto first = s.draw(20);
        auto second = s.draw(20);
        std::multiset<std::vector<int>> x, y;
        for (auto &v : first) x.insert(v.tokens);
        for (auto &v : second) y.insert(v.tokens);
        CHECK(x == y);
    }
}

TEST_CASE("mixed stream errors") {
    auto data = generate_dataset(default_domain_specs(2), 100, 3);
    CHECK_THROWS_AS(MixedStream({}, uniform_proportions(4), 1), StreamError);
    CHECK_THROWS_AS(MixedStream(data.train, {0.5, 0.4}, 1), StreamError);
    CHECK_THROWS_AS(MixedStream(data.train, {1.5, -0.5}, 1), StreamError);
    CHECK_THROWS_AS(MixedStream(filter_domain(data.train, 0), {0.5, 0.5}, 1), StreamError);
    MixedStream s(data.train, uniform_proportions(4), 1);
    CHECK_THROWS_AS(s.next(0), StreamError);
}

TEST_CASE("jsonl round trip") {
    auto data = generate_dataset(default_domain_specs(4), 50, 1);
    auto path = std::filesystem::temp_directory_path() / "loramix_test_samples.jsonl";
    write_samples_jsonl(path, data.val);
    CHECK(read_samples_jsonl(path) == data.val);
    {
        std::ofstream out(path);
        out << "{\"tokens\": [1], \"label\": 0}\n";
    }
    CHECK_THROWS_AS(read_samples_jsonl(path), FormatError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(read_samples_jsonl(path), IOError);
}
