#pragma once

// Constructions shared by the unit tests and the acceptance binary.

#include "decme/linalg_spectral.hpp"
#include "decme/rng.hpp"

#include <algorithm>

namespace decme::fixtures {

/// Block-diagonal surrogate whose first k coordinates carry the k largest DM
/// eigenvalues and are decoupled from the rest. An exact ML-step over those
/// coordinates therefore removes exactly those eigenvalues.
inline QuadSurrogate ecme_pattern_surrogate(Rng& rng, Eigen::Index p, Eigen::Index k) {
  Eigen::VectorXd lambdas = sample_spaced_lambdas(rng, p); // descending
  const Eigen::VectorXd fast = lambdas.head(p - k);
  const Eigen::VectorXd slow = lambdas.tail(k);
  const QuadSurrogate a = random_surrogate(rng, slow);
  const QuadSurrogate b = random_surrogate(rng, fast);
  Matrix i_obs = Matrix::Zero(p, p), i_com = Matrix::Zero(p, p);
  i_obs.topLeftCorner(k, k) = a.i_obs();
  i_com.topLeftCorner(k, k) = a.i_com();
  i_obs.bottomRightCorner(p - k, p - k) = b.i_obs();
  i_com.bottomRightCorner(p - k, p - k) = b.i_com();
  ParamVec theta_hat(p);
  theta_hat << a.theta_hat(), b.theta_hat();
  return make_surrogate(theta_hat, i_obs, i_com);
}

} // namespace decme::fixtures
