#pragma once

namespace tscan {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace tscan
