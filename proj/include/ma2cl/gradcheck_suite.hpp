#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ma2cl {

struct GradcheckComponent {
  std::string name;
  int instances = 0;
  long coordinates = 0;
  double max_error = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckComponent> components;
  double tolerance = 1e-4;
  double seconds = 0.0;
  bool pass() const;
  std::string to_string() const;
};

/// Central finite differences against reverse mode for every network block
/// and loss, on `instances` randomized instances each (64-bit).
GradcheckReport run_gradcheck_suite(int instances = 20, std::uint64_t seed = 0, double tolerance = 1e-4);

}  // namespace ma2cl
