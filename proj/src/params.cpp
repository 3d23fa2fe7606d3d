#include "pfsam/params.hpp"

#include <unordered_set>

namespace pfsam {

ParameterVector::ParameterVector(std::vector<double> values,
                                 std::vector<Segment> segments)
    : values_(std::move(values)), segments_(std::move(segments)) {
  std::size_t expect = 0;
  std::unordered_set<std::string> names;
  for (const Segment& s : segments_) {
    if (s.offset != expect)
      throw UsageError("segments must tile the vector without gaps: " + s.name);
    if (!names.insert(s.name).second)
      throw UsageError("duplicate segment name: " + s.name);
    expect += s.extent;
  }
  if (expect != values_.size())
    throw UsageError("segments do not cover the full vector");
}

ParameterVector ParameterVector::zeros_like(const ParameterVector& other) {
  return ParameterVector(std::vector<double>(other.size(), 0.0),
                         other.segments_);
}

const Segment& ParameterVector::segment(const std::string& name) const {
  for (const Segment& s : segments_)
    if (s.name == name) return s;
  throw UsageError("unknown segment: " + name);
}

bool ParameterVector::same_layout(const ParameterVector& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const Segment& a = segments_[i];
    const Segment& b = other.segments_[i];
    if (a.name != b.name || a.offset != b.offset || a.extent != b.extent)
      return false;
  }
  return true;
}

}  // namespace pfsam
