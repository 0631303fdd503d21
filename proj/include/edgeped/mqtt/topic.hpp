#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "edgeped/error.hpp"

namespace edgeped::mqtt {

class TopicError : public Error {
 public:
  using Error::Error;
};

inline std::vector<std::string> split_topic(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto slash = s.find('/', start);
    out.emplace_back(s.substr(start, slash == std::string_view::npos ? std::string_view::npos : slash - start));
    if (slash == std::string_view::npos) break;
    start = slash + 1;
  }
  return out;
}

// '+' matches exactly one level, a trailing '#' matches the parent level and
// any number of levels below it.
class TopicFilter {
 public:
  explicit TopicFilter(std::string_view filter) : text_(filter), segments_(split_topic(filter)) {
    if (filter.empty()) throw TopicError("topic filter must not be empty");
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      const auto& seg = segments_[i];
      if (seg.find('#') != std::string::npos && (seg != "#" || i + 1 != segments_.size()))
        throw TopicError("'#' must be the whole last level of filter '" + text_ + "'");
      if (seg.find('+') != std::string::npos && seg != "+")
        throw TopicError("'+' must occupy a whole level of filter '" + text_ + "'");
    }
  }

  const std::string& str() const noexcept { return text_; }
  const std::vector<std::string>& segments() const noexcept { return segments_; }
  bool has_wildcards() const noexcept { return text_.find_first_of("+#") != std::string::npos; }

  bool matches(std::string_view topic) const {
    const auto levels = split_topic(topic);
    std::size_t i = 0;
    for (; i < segments_.size(); ++i) {
      if (segments_[i] == "#") return true;
      if (i >= levels.size()) return false;
      if (segments_[i] != "+" && segments_[i] != levels[i]) return false;
    }
    return i == levels.size();
  }

  friend bool operator==(const TopicFilter& a, const TopicFilter& b) { return a.text_ == b.text_; }

 private:
  std::string text_;
  std::vector<std::string> segments_;
};

inline bool valid_topic_name(std::string_view topic) {
  return !topic.empty() && topic.find_first_of("+#") == std::string_view::npos;
}

inline bool topic_matches(const TopicFilter& filter, std::string_view topic) {
  if (!valid_topic_name(topic)) throw TopicError("topic '" + std::string(topic) + "' must be non-empty and wildcard-free");
  return filter.matches(topic);
}

inline std::string detection_topic(std::string_view intersection_id) {
  return "intersection/" + std::string(intersection_id) + "/detections";
}

}  // namespace edgeped::mqtt
