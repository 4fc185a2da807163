#include "dear/log.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>

namespace dear {

namespace {

spdlog::level::level_enum level_from_env() {
  const char* env = std::getenv("DEAR_LOG");
  const std::string v = env ? env : "info";
  if (v == "error") return spdlog::level::err;
  if (v == "debug") return spdlog::level::debug;
  return spdlog::level::info;
}

}  // namespace

spdlog::logger& logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto l = std::make_shared<spdlog::logger>("dear", std::make_shared<spdlog::sinks::stderr_color_sink_mt>());
    l->set_level(level_from_env());
    l->set_pattern("[%l] %v");
    return l;
  }();
  return *instance;
}

}  // namespace dear
