#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "loramix/lora.hpp"
#include "loramix/mixer.hpp"
#include "loramix/routing.hpp"

namespace loramix {

struct BundleEntry {
    std::string layer;
    std::string role;  // "A" or "B"
    Shape shape;
    std::string file;
    std::string sha256;
};

/// One expert's per-layer tensors on disk: `manifest` plus `tensors/<layer>.<role>.bin`.
struct AdapterBundle {
    std::filesystem::path path;
    int expert_id = 0;
    std::string fingerprint;
    std::string engine_version;
    std::string precision;
    LoraConfig lora;
    std::vector<BundleEntry> entries;

    /// Tensors of one layer, checksum-verified.
    std::pair<Tensor, Tensor> load_layer(const std::string &layer) const;
    std::vector<std::string> layers() const;
    bool covers(const std::string &layer) const;
};

enum class LayerVerdict { exact, shape_mismatch, missing_layer };
enum class CompatOverall { loadable, partial, incompatible };

std::string to_string(LayerVerdict v);
std::string to_string(CompatOverall v);

struct CompatReport {
    std::vector<std::pair<std::string, LayerVerdict>> layers;
    CompatOverall overall = CompatOverall::incompatible;

    nlohmann::json to_json() const;
};

/// Hash of projection names and shapes; weights do not enter.
std::string architecture_fingerprint(HostModel &model);

AdapterBundle export_bundle(const std::vector<std::shared_ptr<MixerLayer>> &layers, int expert_id,
                            const std::filesystem::path &path, const std::string &fingerprint = {});

/// Parses the manifest and checks every blob's size and digest.
AdapterBundle read_bundle(const std::filesystem::path &path);

/// Verdicts against the model's wrapped layers, without touching the model.
CompatReport check_compat(const AdapterBundle &bundle, HostModel &model, int slot);

/// Installs into expert `slot` of every wrapped layer whose shapes match.
/// Wrapped layers the bundle does not cover get a zero delta for that slot.
/// Nothing is installed when the verdict is incompatible.
CompatReport import_bundle(const std::filesystem::path &path, HostModel &model, int slot);

/// Wraps the layers named by the bundles with one expert per bundle (in
/// order) and a fresh router. Only routers stay trainable.
std::vector<std::shared_ptr<MixerLayer>> compose(const std::vector<std::filesystem::path> &bundles,
                                                 HostModel &model, const RouterConfig &router_cfg,
                                                 std::uint64_t seed);

}  // namespace loramix
