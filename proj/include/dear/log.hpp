#pragma once

#include <memory>

#include <spdlog/logger.h>

namespace dear {

/// Process logger writing to stderr. Verbosity comes from DEAR_LOG
/// (error | info | debug, default info). Numeric results never go here.
spdlog::logger& logger();

}  // namespace dear
