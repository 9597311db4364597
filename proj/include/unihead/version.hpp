#pragma once

namespace unihead {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace unihead
