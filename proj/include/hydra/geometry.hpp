#pragma once

// Poincare-ball operations at curvature c > 0 (ball radius 1/sqrt(c)).
//
// Two layers share one set of row kernels:
//   * value types (TangentVector, BallPoint) with pure functions, and
//   * batched tape ops over [B, d] tensors with a learnable curvature, whose
//     analytic vector-Jacobian products are written out in geometry.cpp.
//
// Every op that yields a ball point re-projects so that
// sqrt(c) * |x| <= 1 - kBallEps.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hydra/tape.hpp"

namespace hydra::geo {

inline constexpr double kBallEps = 1e-5;
inline constexpr double kNormEps = 1e-9;
inline constexpr double kCurvatureFloor = 1e-3;
inline constexpr double kDegenerateDenominator = 1e-12;

// Number of atanh arguments clamped to 1 - kBallEps since process start.
std::uint64_t clamp_warning_count();

// softplus(raw) + kCurvatureFloor.
double curvature_from_raw(double raw);
// Inverse of curvature_from_raw; value must exceed kCurvatureFloor.
double raw_for_curvature(double value);

// Learnable curvature, stored unconstrained.
struct Curvature {
  double raw = 0.0;

  static Curvature from_value(double value) { return Curvature{raw_for_curvature(value)}; }
  double value() const { return curvature_from_raw(raw); }
};

struct TangentVector {
  std::vector<double> coords;

  std::size_t dim() const { return coords.size(); }
};

// A point inside the ball of curvature c.
class BallPoint {
 public:
  // Rescales onto the shrunken ball if needed.
  static BallPoint project(std::vector<double> coords, double c);
  // Throws DomainError when sqrt(c)|x| >= 1, InvalidInputError on non-finite input.
  // Points in the thin shell (1 - kBallEps, 1) are projected.
  static BallPoint checked(std::vector<double> coords, double c);
  static BallPoint origin(std::size_t dim, double c);

  const std::vector<double>& coords() const { return coords_; }
  double curvature() const { return c_; }
  std::size_t dim() const { return coords_.size(); }

  BallPoint operator-() const;

 private:
  BallPoint(std::vector<double> coords, double c) : coords_(std::move(coords)), c_(c) {}

  std::vector<double> coords_;
  double c_ = 1.0;
};

BallPoint exp_map0(const TangentVector& v, double c);
TangentVector log_map0(const BallPoint& y);
BallPoint mobius_add(const BallPoint& x, const BallPoint& y);
BallPoint mobius_scalar(double r, const BallPoint& x);
BallPoint transport(const BallPoint& x, double c_to);
BallPoint ball_project(std::span<const double> x, double c);

// Row kernels on raw spans. `out` must not alias the inputs.
namespace kernel {

void ball_project(std::span<const double> x, double c, std::span<double> out);
void exp_map0(std::span<const double> v, double c, std::span<double> out);
void log_map0(std::span<const double> y, double c, std::span<double> out);
void mobius_add(std::span<const double> x, std::span<const double> y, double c, std::span<double> out);
void mobius_scalar(double r, std::span<const double> x, double c, std::span<double> out);

// VJPs: accumulate into the input-gradient spans (which may be empty to skip)
// and return the scalar partials.
double ball_project_vjp(std::span<const double> x, double c, std::span<const double> g, std::span<double> gx);
double exp_map0_vjp(std::span<const double> v, double c, std::span<const double> g, std::span<double> gv);
double log_map0_vjp(std::span<const double> y, double c, std::span<const double> g, std::span<double> gy);
double mobius_add_vjp(std::span<const double> x, std::span<const double> y, double c, std::span<const double> g,
                      std::span<double> gx, std::span<double> gy);
struct ScalarVjp {
  double r = 0.0;
  double c = 0.0;
};
ScalarVjp mobius_scalar_vjp(double r, std::span<const double> x, double c, std::span<const double> g,
                            std::span<double> gx);

}  // namespace kernel

// --- tape ops -----------------------------------------------------------------
//
// Points and tangent vectors are [B, d] tensors (one row per example);
// curvatures and Mobius scalars are shape-{1} tensors.

// softplus(raw) + kCurvatureFloor
ad::Var curvature(ad::Var raw);

ad::Var exp_map0(ad::Var v, ad::Var c);
ad::Var log_map0(ad::Var y, ad::Var c);
ad::Var mobius_add(ad::Var x, ad::Var y, ad::Var c);
ad::Var mobius_scalar(ad::Var r, ad::Var x, ad::Var c);
ad::Var ball_project(ad::Var x, ad::Var c);
// Identity (same node) when c_from and c_to are the same Var.
ad::Var transport(ad::Var x, ad::Var c_from, ad::Var c_to);

// Largest sqrt(c)|row| over the rows of a [B, d] tensor.
double max_scaled_norm(const ad::Tensor& points, double c);

}  // namespace hydra::geo
