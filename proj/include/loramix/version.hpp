#pragma once

namespace loramix {

inline constexpr const char *kEngineVersion = "0.1.0";
inline constexpr const char *kPrecision = "float64";

}  // namespace loramix
