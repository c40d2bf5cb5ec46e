#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "loramix/adapters.hpp"
#include "loramix/errors.hpp"
#include "loramix/toy_model.hpp"

using namespace loramix;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string &name) {
    auto p = fs::temp_directory_path() / ("loramix_test_" + name);
    fs::remove_all(p);
    return p;
}

/// A model whose experts all carry random nonzero deltas.
struct Source {
    ToyModel model;
    std::vector<std::shared_ptr<MixerLayer>> mixers;

    explicit Source(const std::string &pattern = "q|v", std::size_t r = 4, ToyModelConfig mc = {})
        : model(mc, 5) {
        LoraConfig lc;
        lc.r = r;
        lc.lora_alpha = 8.0;
        lc.target_projection_names = {pattern};
        mixers = attach_mixers(model, lc, 3, RouterConfig{}, 100);
        std::mt19937_64 rng(7);
        std::normal_distribution<double> n(0.0, 0.1);
        for (auto &m : mixers)
            for (auto &e : m->experts)
                for (auto &v : e.B.mutable_values()) v = n(rng);
    }
};

Tensor forward_all(ToyModel &model, const std::vector<int> &domains) {
    std::vector<LabeledSample> samples;
    std::mt19937_64 rng(3);
    for (int d : domains) {
        LabeledSample s;
        s.domain_id = d;
        for (int t = 0; t < 12; ++t) s.tokens.push_back(static_cast<int>(rng() % 16));
        samples.push_back(s);
    }
    Batch b = make_batch(samples);
    ForwardContext ctx;
    ctx.sample_domains = b.domains;
    return model.forward(b, ctx);
}

}  // namespace

TEST_CASE("export and import round trip") {
    Source src;
    auto dir = scratch("bundle_rt");
    auto bundle = export_bundle(src.mixers, 1, dir, architecture_fingerprint(src.model));
    CHECK(bundle.layers().size() == 4);

    std::uintmax_t bytes = 0;
    for (const auto &e : bundle.entries) bytes += fs::file_size(dir / e.file);
    std::uintmax_t expected = 0;
    for (auto &m : src.mixers) expected += 4 * (m->base.d_in() + m->base.d_out()) * sizeof(double);
    CHECK(bytes == expected);

    Source dst;
    for (auto &m : dst.mixers)
        for (auto &e : m->experts) e.B = Tensor::zeros(e.B.shape());
    auto report = import_bundle(dir, dst.model, 2);
    CHECK(report.overall == CompatOverall::loadable);
    for (std::size_t l = 0; l < src.mixers.size(); ++l) {
        const auto &a = src.mixers[l]->experts[1], &b = dst.mixers[l]->experts[2];
        for (std::size_t i = 0; i < a.A.numel(); ++i) CHECK(a.A[i] == b.A[i]);
        for (std::size_t i = 0; i < a.B.numel(); ++i) CHECK(a.B[i] == b.B[i]);
    }
    CHECK(architecture_fingerprint(src.model) == architecture_fingerprint(dst.model));
    fs::remove_all(dir);
}

TEST_CASE("tampered blobs fail the digest check") {
    Source src;
    auto dir = scratch("bundle_tamper");
    auto bundle = export_bundle(src.mixers, 0, dir);
    {
        std::fstream f(dir / bundle.entries[0].file, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(3);
        f.put('\x7f');
    }
    CHECK_THROWS_AS(read_bundle(dir), IntegrityError);
    fs::remove(dir / bundle.entries[1].file);
    CHECK_THROWS_AS(read_bundle(dir), Error);
    fs::remove_all(dir);
    CHECK_THROWS_AS(read_bundle(dir), IOError);
}

TEST_CASE("compatibility verdicts") {
    Source src;
    auto dir = scratch("bundle_compat");
    export_bundle(src.mixers, 0, dir);

    ToyModelConfig wide;
    wide.d_model = 48;
    Source other("q|v", 4, wide);
    auto before = other.mixers[0]->experts[0].B[0];
    auto report = import_bundle(dir, other.model, 0);
    CHECK(report.overall == CompatOverall::incompatible);
    CHECK(other.mixers[0]->experts[0].B[0] == before);

    Source partial("q|v|o");
    report = import_bundle(dir, partial.model, 1);
    CHECK(report.overall == CompatOverall::partial);
    for (auto &m : partial.mixers)
        if (m->name().ends_with(".o"))
            for (double v : m->experts[1].B.values()) CHECK(v == 0.0);

    Source ranked("q|v", 8);
    CHECK(import_bundle(dir, ranked.model, 0).overall == CompatOverall::incompatible);
    CHECK_THROWS_AS(import_bundle(dir, src.model, 3), IndexError);
    fs::remove_all(dir);
}

TEST_CASE("empty bundles and empty compositions") {
    auto dir = scratch("bundle_empty");
    fs::create_directories(dir);
    {
        std::ofstream m(dir / "manifest");
        m << R"({"format":"loramix-adapter","format_version":1,"precision":"float64","expert_id":0,)"
          << R"("fingerprint":"","engine_version":"x","lora":{},"entries":[]})";
    }
    CHECK_THROWS_AS(read_bundle(dir), FormatError);
    ToyModel model(ToyModelConfig{}, 1);
    CHECK_THROWS_AS(compose({}, model, RouterConfig{}, 1), CompositionError);
    CHECK_THROWS_AS(export_bundle({}, 0, dir), ExportError);
    fs::remove_all(dir);
}

TEST_CASE("composition") {
    Source src;
    auto d0 = scratch("compose0"), d1 = scratch("compose1"), d8 = scratch("compose8");
    export_bundle(src.mixers, 0, d0);
    export_bundle(src.mixers, 1, d1);
    const std::vector<int> doms{0, 1, 0};

    SUBCASE("a single bundle acts like its expert") {
        ToyModel solo(ToyModelConfig{}, 5);
        compose({d0}, solo, RouterConfig{}, 1);
        ToyModel ref = src.model.clone();
        for (auto &m : ref.mixers()) m->router->mode = RoutingMode::hard;
        Tensor a = forward_all(solo, doms), b = forward_all(ref, {0, 0, 0});
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
    SUBCASE("bundle order does not matter once gate rows follow") {
        RouterConfig rc;
        rc.mode = RoutingMode::soft;
        ToyModel m01(ToyModelConfig{}, 5), m10(ToyModelConfig{}, 5);
        auto l01 = compose({d0, d1}, m01, rc, 1);
        auto l10 = compose({d1, d0}, m10, rc, 1);
        for (std::size_t l = 0; l < l01.size(); ++l) {
            auto &g01 = l01[l]->router->gate_weight;
            auto g10 = l10[l]->router->gate_weight.mutable_values();
            const std::size_t d = g01.dim(1);
            for (std::size_t c = 0; c < d; ++c) {
                g10[c] = g01.at(1, c);
                g10[d + c] = g01.at(0, c);
            }
        }
        Tensor a = forward_all(m01, doms), b = forward_all(m10, doms);
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
        for (auto &l : l01) {
            CHECK(l->router->gate_weight.requires_grad());
            CHECK_FALSE(l->experts[0].B.requires_grad());
        }
    }
    SUBCASE("hard-routed composition matches the source") {
        ToyModel pair(ToyModelConfig{}, 5);
        RouterConfig rc;
        rc.mode = RoutingMode::hard;
        compose({d0, d1}, pair, rc, 1);
        ToyModel ref = src.model.clone();
        for (auto &m : ref.mixers()) m->router->mode = RoutingMode::hard;
        Tensor a = forward_all(pair, doms), b = forward_all(ref, doms);
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
    SUBCASE("rank mismatch") {
        Source ranked("q|v", 8);
        export_bundle(ranked.mixers, 0, d8);
        ToyModel m(ToyModelConfig{}, 5);
        CHECK_THROWS_AS(compose({d0, d8}, m, RouterConfig{}, 1), CompositionError);
    }
    SUBCASE("uncovered layers get a zero delta") {
        auto dq = scratch("compose_q");
        std::vector<std::shared_ptr<MixerLayer>> only_q;
        for (auto &m : src.mixers)
            if (m->name().ends_with(".q")) only_q.push_back(m);
        export_bundle(only_q, 2, dq);
        ToyModel m(ToyModelConfig{}, 5);
        auto layers = compose({d0, dq}, m, RouterConfig{}, 1);
        for (auto &l : layers)
            if (l->name().ends_with(".v"))
                for (double v : l->experts[1].B.values()) CHECK(v == 0.0);
        fs::remove_all(dq);
    }
    for (auto &d : {d0, d1, d8}) fs::remove_all(d);
}
