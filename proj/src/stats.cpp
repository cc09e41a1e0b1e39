#include "xover/stats.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>

namespace xover {

double t_quantile(double p, double df) {
  boost::math::students_t_distribution<double> dist(df);
  return boost::math::quantile(dist, p);
}

double normal_quantile(double p) {
  boost::math::normal_distribution<double> dist(0.0, 1.0);
  return boost::math::quantile(dist, p);
}

double sample_mean(const Eigen::VectorXd& v) {
  return v.size() > 0 ? v.mean() : 0.0;
}

double sample_sd(const Eigen::VectorXd& v) {
  const Eigen::Index n = v.size();
  if (n < 2) return 0.0;
  const double m = v.mean();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = v[i] - m;
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(n - 1));
}

}  // namespace xover
