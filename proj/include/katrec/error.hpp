#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace katrec {

/// Base error type for every module; `what()` carries a structured message
/// of the form "<where>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(const std::string& where, const std::string& detail)
      : std::runtime_error(where + ": " + detail), where_(where) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

namespace detail {
template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(const std::string& where, Args&&... args) {
  throw Error(where, detail::concat(std::forward<Args>(args)...));
}

}  // namespace katrec
