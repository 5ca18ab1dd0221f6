#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace mhss {

/// Exact multiply-accumulate counters keyed by pipeline stage.
/// Only matrix products record counts: a (m,k)x(k,n) product adds m*k*n
/// MACs per batch element, so counters are integers and scaling checks can
/// compare them exactly. Counters only grow until reset() starts a new
/// recording session.
class FlopCounter {
 public:
  void add(const std::string& tag, std::uint64_t macs) {
    counts_[tag] += macs;
    total_ += macs;
  }

  std::uint64_t total() const { return total_; }

  std::uint64_t by_tag(const std::string& tag) const {
    auto it = counts_.find(tag);
    return it == counts_.end() ? 0 : it->second;
  }

  const std::map<std::string, std::uint64_t>& by_stage() const { return counts_; }

  void reset() {
    counts_.clear();
    total_ = 0;
  }

 private:
  std::map<std::string, std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

inline FlopCounter& flop_counter() {
  thread_local FlopCounter counter;
  return counter;
}

namespace detail {
inline std::vector<std::string>& stage_stack() {
  thread_local std::vector<std::string> stack;
  return stack;
}
}  // namespace detail

inline std::string current_stage(const std::string& fallback) {
  const auto& stack = detail::stage_stack();
  return stack.empty() ? fallback : stack.back();
}

/// Labels every MAC recorded while in scope with a pipeline stage name.
/// The innermost label wins, so blocks that set their own stages (e.g.
/// attention) keep them when called under a coarser one.
class FlopStage {
 public:
  explicit FlopStage(std::string name) { detail::stage_stack().push_back(std::move(name)); }
  ~FlopStage() { detail::stage_stack().pop_back(); }
  FlopStage(const FlopStage&) = delete;
  FlopStage& operator=(const FlopStage&) = delete;
};

}  // namespace mhss
