#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "pseg/volume.hpp"

namespace pseg::cli {

/// "z=<slice>,<xmin>,<ymin>,<xmax>,<ymax>" (half-open in x and y).
BoundingBox2D parse_box(const std::string& text);
/// "top:bottom", inclusive.
SliceRange parse_range(const std::string& text);

/// Runs one command line. Returns the process exit code: 0 success, 1 runtime
/// error, 2 usage error. Errors go to `err` as one JSON object.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pseg::cli
