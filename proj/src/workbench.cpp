#include "loramix/workbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "loramix/errors.hpp"
#include "loramix/rng.hpp"

namespace loramix {

std::string to_string(DomainRule rule) {
    switch (rule) {
        case DomainRule::token_sum_parity: return "token-sum-parity";
        case DomainRule::majority_class: return "majority-class";
        case DomainRule::first_token_copy: return "first-token-copy";
        case DomainRule::max_position: return "max-position";
    }
    return "?";
}

DomainRule parse_domain_rule(const std::string &text) {
    for (auto r : {DomainRule::token_sum_parity, DomainRule::majority_class, DomainRule::first_token_copy,
                   DomainRule::max_position}) {
        if (to_string(r) == text) return r;
    }
    throw SpecError("unknown domain rule '" + text + "'");
}

void DomainSpec::validate() const {
    if (domain_id < 0) throw SpecError("domain id must be >= 0");
    if (seq_len < 2) throw SpecError("sequence length must be at least 2");
    if (band_width < 2) throw SpecError("token band must hold at least two values");
    if (band_offset + band_width > vocab) {
        throw SpecError("band [" + std::to_string(band_offset) + ", " + std::to_string(band_offset + band_width) +
                        ") of domain " + std::to_string(domain_id) + " exceeds vocab " + std::to_string(vocab));
    }
}

std::vector<DomainSpec> default_domain_specs(std::uint64_t seed, std::size_t vocab, std::size_t seq_len) {
    const DomainRule rules[] = {DomainRule::token_sum_parity, DomainRule::majority_class,
                                DomainRule::first_token_copy, DomainRule::max_position};
    std::vector<DomainSpec> specs;
    for (int d = 0; d < 4; ++d) {
        DomainSpec s;
        s.domain_id = d;
        s.rule = rules[d];
        s.vocab = vocab;
        s.seq_len = seq_len;
        s.seed = derive_seed(seed, {static_cast<std::uint64_t>(d)});
        s.band_width = 4;
        s.band_offset = 4 * static_cast<std::size_t>(d);
        specs.push_back(s);
    }
    return specs;
}

int apply_rule(const DomainSpec &spec, std::span<const int> tokens) {
    if (tokens.size() != spec.seq_len) {
        throw DimensionError("domain " + std::to_string(spec.domain_id) + " expects " +
                             std::to_string(spec.seq_len) + " tokens, got " + std::to_string(tokens.size()));
    }
    std::vector<int> v(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int rel = tokens[i] - static_cast<int>(spec.band_offset);
        if (rel < 0 || rel >= static_cast<int>(spec.band_width)) {
            throw DomainError("token " + std::to_string(tokens[i]) + " outside the band of domain " +
                              std::to_string(spec.domain_id));
        }
        v[i] = rel;
    }
    const int high = static_cast<int>(spec.band_width / 2);
    const std::size_t half = spec.seq_len / 2;
    switch (spec.rule) {
        case DomainRule::token_sum_parity:
            return std::accumulate(tokens.begin(), tokens.end(), 0) % 2;
        case DomainRule::majority_class: {
            const auto count = static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [&](int x) { return x >= high; }));
            return count > half ? 1 : 0;
        }
        case DomainRule::first_token_copy:
            return v[0] >= high ? 1 : 0;
        case DomainRule::max_position: {
            const auto pos = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
            return pos < half ? 1 : 0;
        }
    }
    return 0;
}

namespace {

std::vector<int> propose(const DomainSpec &spec, std::mt19937_64 &rng) {
    const int base = static_cast<int>(spec.band_offset);
    const int width = static_cast<int>(spec.band_width);
    const int high = width / 2;
    const std::size_t L = spec.seq_len;
    std::vector<int> t(L);
    auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    switch (spec.rule) {
        case DomainRule::token_sum_parity: {
            // Even values everywhere, then at most one odd value.
            for (auto &x : t) x = 2 * uniform(0, (width - 1) / 2);
            if (uniform(0, 1) == 1) t[static_cast<std::size_t>(uniform(0, static_cast<int>(L) - 1))] = 2 * uniform(0, (width - 2) / 2) + 1;
            break;
        }
        case DomainRule::majority_class: {
            // Counts of high values close to the threshold on either side.
            const int h = static_cast<int>(L / 2);
            std::vector<int> choices;
            for (int k : {h - 2, h - 1, h + 1, h + 2})
                if (k >= 0 && k <= static_cast<int>(L) - 1) choices.push_back(k);
            const int k = choices[static_cast<std::size_t>(uniform(0, static_cast<int>(choices.size()) - 1))];
            for (std::size_t i = 0; i + 1 < L; ++i) t[i] = uniform(0, high - 1);
            std::vector<std::size_t> pos(L - 1);
            std::iota(pos.begin(), pos.end(), std::size_t{0});
            std::shuffle(pos.begin(), pos.end(), rng);
            for (int i = 0; i < k; ++i) t[pos[static_cast<std::size_t>(i)]] = uniform(high, width - 1);
            t[L - 1] = uniform(0, width - 1);
            break;
        }
        case DomainRule::first_token_copy:
        case DomainRule::max_position:
            for (auto &x : t) x = uniform(0, width - 1);
            break;
    }
    for (auto &x : t) x += base;
    return t;
}

}  // namespace

DatasetSplits generate_dataset(const std::vector<DomainSpec> &specs, std::size_t n_per_domain,
                               std::uint64_t split_seed) {
    if (specs.empty()) throw SpecError("no domain specs");
    if (n_per_domain < 10) throw SpecError("n_per_domain must be at least 10");
    std::set<DomainRule> rules;
    std::set<int> ids;
    for (const auto &s : specs) {
        s.validate();
        if (!rules.insert(s.rule).second) throw SpecError("rule " + to_string(s.rule) + " used by two domains");
        if (!ids.insert(s.domain_id).second) throw SpecError("domain id " + std::to_string(s.domain_id) + " repeated");
    }
    DatasetSplits out;
    for (const auto &spec : specs) {
        std::mt19937_64 rng(derive_seed(spec.seed, {split_seed}));
        std::set<std::vector<int>> seen;
        std::vector<LabeledSample> by_label[2];
        const std::size_t want[2] = {n_per_domain - n_per_domain / 2, n_per_domain / 2};
        std::size_t attempts = 0;
        int next_label = 0;
        while (by_label[0].size() < want[0] || by_label[1].size() < want[1]) {
            if (++attempts > 200 * n_per_domain + 100000) {
                throw SpecError("domain " + std::to_string(spec.domain_id) + " cannot yield " +
                                std::to_string(n_per_domain) + " distinct balanced samples");
            }
            auto tokens = propose(spec, rng);
            const int label = apply_rule(spec, tokens);
            if (label != next_label) continue;
            if (!seen.insert(tokens).second) continue;
            by_label[label].push_back({std::move(tokens), label, spec.domain_id});
            next_label = by_label[1 - label].size() < want[1 - label] ? 1 - label : label;
        }
        for (auto &group : by_label) {
            std::shuffle(group.begin(), group.end(), rng);
            const std::size_t n = group.size();
            const std::size_t n_val = n / 10, n_test = n / 10;
            const std::size_t n_train = n - n_val - n_test;
            out.train.insert(out.train.end(), group.begin(), group.begin() + static_cast<long>(n_train));
            out.val.insert(out.val.end(), group.begin() + static_cast<long>(n_train),
                           group.begin() + static_cast<long>(n_train + n_val));
            out.test.insert(out.test.end(), group.begin() + static_cast<long>(n_train + n_val), group.end());
        }
    }
    std::mt19937_64 mix(derive_seed(split_seed, {0xDA7A}));
    std::shuffle(out.train.begin(), out.train.end(), mix);
    std::shuffle(out.val.begin(), out.val.end(), mix);
    std::shuffle(out.test.begin(), out.test.end(), mix);
    return out;
}

std::vector<LabeledSample> filter_domain(const std::vector<LabeledSample> &samples, int domain_id) {
    std::vector<LabeledSample> out;
    for (const auto &s : samples)
        if (s.domain_id == domain_id) out.push_back(s);
    return out;
}

Batch make_batch(std::span<const LabeledSample> samples) {
    Batch b;
    b.size = samples.size();
    b.seq_len = samples.empty() ? 0 : samples[0].tokens.size();
    b.tokens.reserve(b.size * b.seq_len);
    for (const auto &s : samples) {
        if (s.tokens.size() != b.seq_len) throw DimensionError("samples in a batch must share a length");
        b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
        b.labels.push_back(s.label);
        b.domains.push_back(s.domain_id);
    }
    return b;
}

std::vector<double> uniform_proportions(std::size_t domains) {
    return std::vector<double>(domains, 1.0 / static_cast<double>(domains));
}

MixedStream::MixedStream(const std::vector<LabeledSample> &pool, std::vector<double> proportions,
                         std::uint64_t seed, std::size_t limit)
    : rng_(seed) {
    if (pool.empty()) throw StreamError("empty split");
    if (proportions.empty()) throw StreamError("no proportions");
    double total = 0.0;
    for (double p : proportions) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw StreamError("proportions must be finite and >= 0");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw StreamError("proportions sum to " + std::to_string(total) + ", not 1");
    by_domain_.resize(proportions.size());
    for (const auto &s : pool) {
        if (s.domain_id >= 0 && static_cast<std::size_t>(s.domain_id) < by_domain_.size()) {
            by_domain_[static_cast<std::size_t>(s.domain_id)].push_back(s);
        }
    }
    for (std::size_t d = 0; d < proportions.size(); ++d) {
        if (proportions[d] > 0.0 && by_domain_[d].empty()) {
            throw StreamError("domain " + std::to_string(d) + " has weight but no samples");
        }
        std::shuffle(by_domain_[d].begin(), by_domain_[d].end(), rng_);
    }
    cursor_.assign(by_domain_.size(), 0);
    pick_ = std::discrete_distribution<int>(proportions.begin(), proportions.end());
    if (limit > 0) {
        fixed_.reserve(limit);
        for (std::size_t i = 0; i < limit; ++i) fixed_.push_back(fresh_sample());
        std::shuffle(fixed_.begin(), fixed_.end(), rng_);
    }
}

LabeledSample MixedStream::fresh_sample() {
    const auto d = static_cast<std::size_t>(pick_(rng_));
    auto &group = by_domain_[d];
    if (cursor_[d] == group.size()) {
        std::shuffle(group.begin(), group.end(), rng_);
        cursor_[d] = 0;
    }
    return group[cursor_[d]++];
}

LabeledSample MixedStream::next_sample() {
    if (fixed_.empty()) return fresh_sample();
    if (fixed_cursor_ == fixed_.size()) {
        std::shuffle(fixed_.begin(), fixed_.end(), rng_);
        fixed_cursor_ = 0;
    }
    return fixed_[fixed_cursor_++];
}

std::vector<LabeledSample> MixedStream::draw(std::size_t n) {
    std::vector<LabeledSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(next_sample());
    return out;
}

Batch MixedStream::next(std::size_t batch_size) {
    if (batch_size == 0) throw StreamError("batch size must be positive");
    auto samples = draw(batch_size);
    return make_batch(samples);
}

nlohmann::json to_json(const LabeledSample &s) {
    return {{"tokens", s.tokens}, {"label", s.label}, {"domain_id", s.domain_id}};
}

LabeledSample sample_from_json(const nlohmann::json &j) {
    try {
        return {j.at("tokens").get<std::vector<int>>(), j.at("label").get<int>(), j.at("domain_id").get<int>()};
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("malformed sample record: ") + e.what());
    }
}

void write_samples_jsonl(const std::filesystem::path &path, const std::vector<LabeledSample> &samples) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IOError("cannot write '" + path.string() + "'");
    for (const auto &s : samples) out << to_json(s).dump() << '\n';
    if (!out) throw IOError("write to '" + path.string() + "' failed");
}

std::vector<LabeledSample> read_samples_jsonl(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    std::vector<LabeledSample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(sample_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error &e) {
            throw FormatError("bad line in '" + path.string() + "': " + e.what());
        }
    }
    return out;
}

}  // namespace loramix
