#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace loramix {

enum class DomainRule { token_sum_parity, majority_class, first_token_copy, max_position };

std::string to_string(DomainRule rule);
DomainRule parse_domain_rule(const std::string &text);

/// Domain d draws its tokens from the band [band_offset, band_offset + band_width).
struct DomainSpec {
    int domain_id = 0;
    DomainRule rule = DomainRule::token_sum_parity;
    std::size_t vocab = 16;
    std::size_t seq_len = 12;
    std::uint64_t seed = 0;
    std::size_t band_offset = 0;
    std::size_t band_width = 4;

    void validate() const;
};

struct LabeledSample {
    std::vector<int> tokens;
    int label = 0;
    int domain_id = 0;

    bool operator==(const LabeledSample &) const = default;
};

struct DatasetSplits {
    std::vector<LabeledSample> train;
    std::vector<LabeledSample> val;
    std::vector<LabeledSample> test;
};

/// The four default domains: parity, majority, first-token copy, max position,
/// each on its own band of four tokens.
std::vector<DomainSpec> default_domain_specs(std::uint64_t seed, std::size_t vocab = 16, std::size_t seq_len = 12);

/// Label of `tokens` under the spec's rule. Tokens must lie inside the band.
int apply_rule(const DomainSpec &spec, std::span<const int> tokens);

/// Label-balanced, duplicate-free samples split 80/10/10 per domain.
DatasetSplits generate_dataset(const std::vector<DomainSpec> &specs, std::size_t n_per_domain,
                               std::uint64_t split_seed);

/// Samples of one domain only.
std::vector<LabeledSample> filter_domain(const std::vector<LabeledSample> &samples, int domain_id);

struct Batch {
    std::vector<int> tokens;  // size * seq_len, row-major
    std::vector<int> labels;
    std::vector<int> domains;
    std::size_t size = 0;
    std::size_t seq_len = 0;
};

Batch make_batch(std::span<const LabeledSample> samples);

/// Infinite shuffled stream over a pool. Each slot's domain is drawn from
/// `proportions` (indexed by domain id); samples of a domain are visited in
/// reshuffled epochs. With `limit` > 0 the stream first draws that many
/// samples and then cycles over them in reshuffled epochs.
class MixedStream {
   public:
    MixedStream(const std::vector<LabeledSample> &pool, std::vector<double> proportions, std::uint64_t seed,
                std::size_t limit = 0);

    Batch next(std::size_t batch_size);
    std::vector<LabeledSample> draw(std::size_t n);

   private:
    LabeledSample next_sample();
    LabeledSample fresh_sample();

    std::vector<std::vector<LabeledSample>> by_domain_;
    std::vector<std::size_t> cursor_;
    std::discrete_distribution<int> pick_;
    std::mt19937_64 rng_;
    std::vector<LabeledSample> fixed_;
    std::size_t fixed_cursor_ = 0;
};

std::vector<double> uniform_proportions(std::size_t domains);

nlohmann::json to_json(const LabeledSample &s);
LabeledSample sample_from_json(const nlohmann::json &j);
void write_samples_jsonl(const std::filesystem::path &path, const std::vector<LabeledSample> &samples);
std::vector<LabeledSample> read_samples_jsonl(const std::filesystem::path &path);

}  // namespace loramix
