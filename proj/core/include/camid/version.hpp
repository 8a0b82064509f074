#pragma once

namespace camid {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kToolName = "camid";

}  // namespace camid
