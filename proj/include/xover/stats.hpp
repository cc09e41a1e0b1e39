#ifndef XOVER_STATS_HPP
#define XOVER_STATS_HPP

#include <Eigen/Core>

namespace xover {

// Upper quantile of Student's t with df degrees of freedom, e.g.
// t_quantile(0.975, 38) for a two-sided 95% interval.
double t_quantile(double p, double df);

// Standard normal quantile.
double normal_quantile(double p);

double sample_mean(const Eigen::VectorXd& v);

// Sample standard deviation with the n-1 denominator.
double sample_sd(const Eigen::VectorXd& v);

}  // namespace xover

#endif
