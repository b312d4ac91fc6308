#include <cmath>

#include "lape/binary_io.hpp"
#include "lape/correlation.hpp"

namespace lape {

std::string encode_pgm(const Eigen::Ref<const Eigen::MatrixXd>& values, double lo, double hi) {
  if (!(lo < hi)) throw ContractError("encode_pgm: range needs lo < hi");
  std::string out = "P5\n" + std::to_string(values.cols()) + " " + std::to_string(values.rows()) + "\n255\n";
  for (Index r = 0; r < values.rows(); ++r)
    for (Index c = 0; c < values.cols(); ++c) {
      const double v = values(r, c);
      if (std::isnan(v)) {
        out.push_back(0);
        continue;
      }
      const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::floor(t * 255.0 + 0.5))));
    }
  return out;
}

void write_pgm(const Eigen::Ref<const Eigen::MatrixXd>& values, const std::filesystem::path& path, double lo,
               double hi) {
  io::write_file(path, encode_pgm(values, lo, hi));
}

}  // namespace lape
