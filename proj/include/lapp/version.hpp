#pragma once

namespace lapp {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace lapp
