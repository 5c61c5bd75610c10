#pragma once

#include <string>
#include <string_view>

#include "refprior/prior.hpp"

namespace refprior {

enum class Label { real = 0, fake = 1 };

inline std::string_view to_string(Label l) { return l == Label::real ? "real" : "fake"; }

inline Label parse_label(std::string_view s) {
  if (s == "real") return Label::real;
  if (s == "fake") return Label::fake;
  throw ContractViolation("unknown label '" + std::string(s) + "' (expected real|fake)");
}

/// One image's features with its provenance.
struct Sample {
  std::string image_id;
  FeatureMap features;
  Label label = Label::real;
  std::string generator = "none";
  std::string corruption = "clean";
};

}  // namespace refprior
