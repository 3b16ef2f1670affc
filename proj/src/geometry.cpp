#include "hydra/geometry.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "hydra/error.hpp"

namespace hydra::geo {

namespace {

constexpr double kMaxScaledNorm = 1.0 - kBallEps;
// Values this far past the shell are counted as genuine clamps; smaller
// excursions are rounding noise from a previous projection.
constexpr double kClampReportSlack = 1e-9;
constexpr double kSeriesCutoff = 1e-2;

std::atomic<std::uint64_t> g_clamp_warnings{0};

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void require_curvature(double c) {
  if (!(c > 0.0) || !std::isfinite(c)) {
    throw InvalidInputError("curvature must be positive and finite, got " + std::to_string(c));
  }
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw InvalidInputError(std::string(what) + ": non-finite coordinate");
  }
}

// tanh(a)/a and its derivative.
struct ExpFactor {
  double f, df;
};

ExpFactor exp_factor(double a) {
  if (a < kSeriesCutoff) {
    const double a2 = a * a;
    return {1.0 - a2 / 3.0 + 2.0 * a2 * a2 / 15.0 - 17.0 * a2 * a2 * a2 / 315.0,
            a * (-2.0 / 3.0 + 8.0 * a2 / 15.0 - 34.0 * a2 * a2 / 105.0)};
  }
  const double t = std::tanh(a);
  return {t / a, ((1.0 - t * t) * a - t) / (a * a)};
}

// atanh(b)/b and its derivative.
ExpFactor log_factor(double b) {
  if (b < kSeriesCutoff) {
    const double b2 = b * b;
    return {1.0 + b2 / 3.0 + b2 * b2 / 5.0 + b2 * b2 * b2 / 7.0, b * (2.0 / 3.0 + 4.0 * b2 / 5.0 + 6.0 * b2 * b2 / 7.0)};
  }
  const double at = std::atanh(b);
  return {at / b, (b / (1.0 - b * b) - at) / (b * b)};
}

// Clamps an atanh argument into the shrunken ball; returns true when clamped.
bool clamp_arg(double& b, bool report) {
  if (b <= kMaxScaledNorm) return false;
  if (report && b > kMaxScaledNorm + kClampReportSlack) g_clamp_warnings.fetch_add(1, std::memory_order_relaxed);
  b = kMaxScaledNorm;
  return true;
}

// Scale factor h with log(y) = h*y, plus dh/db (b = sqrt(c)|y|).
ExpFactor log_scale(double b_raw, bool report) {
  double b = b_raw;
  if (clamp_arg(b, report)) {
    const double h = std::atanh(b) / b_raw;
    return {h, -h / b_raw};
  }
  return log_factor(b_raw);
}

// q = tanh(r*atanh(b))/b and dq/db, dq/dr.
struct ScalarFactor {
  double q, dq_db, dq_dr;
};

ScalarFactor scalar_factor(double r, double b_raw, bool report) {
  double b = b_raw;
  const bool clamped = clamp_arg(b, report);
  const double u = std::atanh(b);
  const double t = std::tanh(r * u);
  const double sech2 = 1.0 - t * t;
  ScalarFactor out{};
  out.q = t / b_raw;
  out.dq_dr = sech2 * u / b_raw;
  if (clamped) {
    out.dq_db = -out.q / b_raw;
  } else if (b_raw < 1e-4) {
    out.dq_db = 2.0 * r * (1.0 - r * r) * b_raw / 3.0;
  } else {
    const double dt_db = sech2 * r / (1.0 - b_raw * b_raw);
    out.dq_db = (dt_db * b_raw - t) / (b_raw * b_raw);
  }
  return out;
}

void exp_raw(std::span<const double> v, double c, std::span<double> out) {
  const double n = norm(v);
  if (n < kNormEps) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  const double f = exp_factor(std::sqrt(c) * n).f;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = f * v[i];
}

void add_raw(std::span<const double> x, std::span<const double> y, double c, std::span<double> out) {
  const double xy = dot(x, y), xx = dot(x, x), yy = dot(y, y);
  const double a = 1.0 + 2.0 * c * xy + c * yy;
  const double b = 1.0 - c * xx;
  const double d = 1.0 + 2.0 * c * xy + c * c * xx * yy;
  if (std::abs(d) < kDegenerateDenominator) throw NumericalError("mobius_add: degenerate denominator");
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (a * x[i] + b * y[i]) / d;
}

void scalar_raw(double r, std::span<const double> x, double c, std::span<double> out, bool report) {
  const double m = norm(x);
  if (m < kNormEps || r == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  const double q = scalar_factor(r, std::sqrt(c) * m, report).q;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = q * x[i];
}

void project_in_place(std::span<double> x, double c) {
  const double s = std::sqrt(c);
  const double n = norm(x);
  if (s * n > kMaxScaledNorm) {
    const double k = kMaxScaledNorm / (s * n);
    for (double& v : x) v *= k;
  }
}

}  // namespace

std::uint64_t clamp_warning_count() { return g_clamp_warnings.load(std::memory_order_relaxed); }

double curvature_from_raw(double raw) {
  const double sp = raw > 0.0 ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
  return sp + kCurvatureFloor;
}

double raw_for_curvature(double value) {
  if (!(value > kCurvatureFloor)) {
    throw InvalidInputError("curvature " + std::to_string(value) + " is not above the floor 1e-3");
  }
  const double sp = value - kCurvatureFloor;
  // inverse softplus: log(expm1(sp)), stable for large sp
  return sp > 30.0 ? sp + std::log1p(-std::exp(-sp)) : std::log(std::expm1(sp));
}

// --- row kernels --------------------------------------------------------------

namespace kernel {

void ball_project(std::span<const double> x, double c, std::span<double> out) {
  std::copy(x.begin(), x.end(), out.begin());
  project_in_place(out, c);
}

double ball_project_vjp(std::span<const double> x, double c, std::span<const double> g, std::span<double> gx) {
  const double s = std::sqrt(c);
  const double n = norm(x);
  if (!(s * n > kMaxScaledNorm)) {
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    return 0.0;
  }
  const double radius = kMaxScaledNorm / s;
  const double xg = dot(x, g) / n;  // component of g along x-hat
  double gy = 0.0;                  // g . y where y = radius * x-hat
  for (std::size_t i = 0; i < x.size(); ++i) gy += g[i] * radius * x[i] / n;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (radius / n) * (g[i] - xg * x[i] / n);
  return -gy / (2.0 * c);
}

void exp_map0(std::span<const double> v, double c, std::span<double> out) {
  exp_raw(v, c, out);
  project_in_place(out, c);
}

double exp_map0_vjp(std::span<const double> v, double c, std::span<const double> g, std::span<double> gv) {
  const double n = norm(v);
  if (n < kNormEps) {
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i];
    return 0.0;
  }
  const double s = std::sqrt(c);
  const ExpFactor ef = exp_factor(s * n);
  std::vector<double> raw(v.size()), g_raw(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) raw[i] = ef.f * v[i];
  double gc = ball_project_vjp(raw, c, g, g_raw);
  const double vg = dot(v, g_raw);
  const double radial = ef.df * s * vg / n;
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += ef.f * g_raw[i] + radial * v[i];
  gc += ef.df * n * vg / (2.0 * s);
  return gc;
}

void log_map0(std::span<const double> y, double c, std::span<double> out) {
  const double m = norm(y);
  if (m < kNormEps) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  const double h = log_scale(std::sqrt(c) * m, true).f;
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = h * y[i];
}

double log_map0_vjp(std::span<const double> y, double c, std::span<const double> g, std::span<double> gy) {
  const double m = norm(y);
  if (m < kNormEps) {
    for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += g[i];
    return 0.0;
  }
  const double s = std::sqrt(c);
  const ExpFactor lf = log_scale(s * m, false);
  const double yg = dot(y, g);
  const double radial = lf.df * s * yg / m;
  for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += lf.f * g[i] + radial * y[i];
  return lf.df * m * yg / (2.0 * s);
}

void mobius_add(std::span<const double> x, std::span<const double> y, double c, std::span<double> out) {
  add_raw(x, y, c, out);
  project_in_place(out, c);
}

double mobius_add_vjp(std::span<const double> x, std::span<const double> y, double c, std::span<const double> g,
                      std::span<double> gx, std::span<double> gy) {
  const std::size_t d = x.size();
  std::vector<double> raw(d), g_raw(d, 0.0);
  add_raw(x, y, c, raw);
  double gc = ball_project_vjp(raw, c, g, g_raw);

  const double xy = dot(x, y), xx = dot(x, x), yy = dot(y, y);
  const double a = 1.0 + 2.0 * c * xy + c * yy;
  const double b = 1.0 - c * xx;
  const double den = 1.0 + 2.0 * c * xy + c * c * xx * yy;
  // out = N / den; gN = g / den, gden = -(g . N) / den^2 = -(g . out) / den
  const double gden = -dot(g_raw, raw) / den;
  const double xg = dot(x, g_raw) / den;
  const double yg = dot(y, g_raw) / den;
  if (!gx.empty()) {
    for (std::size_t i = 0; i < d; ++i) {
      gx[i] += a * g_raw[i] / den + 2.0 * c * y[i] * xg - 2.0 * c * x[i] * yg +
               gden * (2.0 * c * y[i] + 2.0 * c * c * yy * x[i]);
    }
  }
  if (!gy.empty()) {
    for (std::size_t i = 0; i < d; ++i) {
      gy[i] += b * g_raw[i] / den + (2.0 * c * x[i] + 2.0 * c * y[i]) * xg +
               gden * (2.0 * c * x[i] + 2.0 * c * c * xx * y[i]);
    }
  }
  gc += xg * (2.0 * xy + yy) - yg * xx + gden * (2.0 * xy + 2.0 * c * xx * yy);
  return gc;
}

void mobius_scalar(double r, std::span<const double> x, double c, std::span<double> out) {
  scalar_raw(r, x, c, out, true);
  project_in_place(out, c);
}

ScalarVjp mobius_scalar_vjp(double r, std::span<const double> x, double c, std::span<const double> g,
                            std::span<double> gx) {
  const double m = norm(x);
  if (m < kNormEps) {
    // d(r (x) x)/dx -> r*I at the origin
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += r * g[i];
    return {};
  }
  const std::size_t d = x.size();
  const double s = std::sqrt(c);
  std::vector<double> raw(d), g_raw(d, 0.0);
  scalar_raw(r, x, c, raw, false);
  ScalarVjp out;
  out.c = ball_project_vjp(raw, c, g, g_raw);
  const ScalarFactor sf = scalar_factor(r, s * m, false);
  const double xg = dot(x, g_raw);
  const double radial = sf.dq_db * s * xg / m;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += sf.q * g_raw[i] + radial * x[i];
  out.r = sf.dq_dr * xg;
  out.c += sf.dq_db * m * xg / (2.0 * s);
  return out;
}

}  // namespace kernel

// --- value API -----------------------------------------------------------------

BallPoint BallPoint::project(std::vector<double> coords, double c) {
  require_curvature(c);
  require_finite(coords, "ball_project");
  project_in_place(coords, c);
  return BallPoint(std::move(coords), c);
}

BallPoint BallPoint::checked(std::vector<double> coords, double c) {
  require_curvature(c);
  require_finite(coords, "BallPoint");
  const double scaled = std::sqrt(c) * norm(coords);
  if (scaled >= 1.0) {
    std::ostringstream os;
    os << "point with sqrt(c)*|x| = " << scaled << " lies on or outside the ball of curvature " << c;
    throw DomainError(os.str());
  }
  project_in_place(coords, c);
  return BallPoint(std::move(coords), c);
}

BallPoint BallPoint::origin(std::size_t dim, double c) {
  require_curvature(c);
  return BallPoint(std::vector<double>(dim, 0.0), c);
}

BallPoint BallPoint::operator-() const {
  std::vector<double> neg(coords_);
  for (double& v : neg) v = -v;
  return BallPoint(std::move(neg), c_);
}

BallPoint exp_map0(const TangentVector& v, double c) {
  require_curvature(c);
  require_finite(v.coords, "exp_map0");
  std::vector<double> out(v.dim());
  kernel::exp_map0(v.coords, c, out);
  return BallPoint::project(std::move(out), c);
}

TangentVector log_map0(const BallPoint& y) {
  TangentVector out{std::vector<double>(y.dim())};
  kernel::log_map0(y.coords(), y.curvature(), out.coords);
  return out;
}

BallPoint mobius_add(const BallPoint& x, const BallPoint& y) {
  if (x.curvature() != y.curvature()) throw InvalidInputError("mobius_add: operands live in different balls");
  if (x.dim() != y.dim()) throw InvalidInputError("mobius_add: dimension mismatch");
  std::vector<double> out(x.dim());
  kernel::mobius_add(x.coords(), y.coords(), x.curvature(), out);
  return BallPoint::project(std::move(out), x.curvature());
}

BallPoint mobius_scalar(double r, const BallPoint& x) {
  if (!std::isfinite(r)) throw InvalidInputError("mobius_scalar: non-finite scalar");
  std::vector<double> out(x.dim());
  kernel::mobius_scalar(r, x.coords(), x.curvature(), out);
  return BallPoint::project(std::move(out), x.curvature());
}

BallPoint transport(const BallPoint& x, double c_to) {
  require_curvature(c_to);
  if (c_to == x.curvature()) return x;
  return exp_map0(log_map0(x), c_to);
}

BallPoint ball_project(std::span<const double> x, double c) {
  return BallPoint::project(std::vector<double>(x.begin(), x.end()), c);
}

// --- tape ops -------------------------------------------------------------------

namespace {

struct RowView {
  std::size_t rows, cols;
};

RowView rows_of(const ad::Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected [B, d], got " + ad::shape_str(t.shape()));
  return {t.dim(0), t.dim(1)};
}

double scalar_of(const ad::Tensor& t, const char* op) {
  if (t.numel() != 1) throw ShapeError(std::string(op) + ": expected a scalar, got " + ad::shape_str(t.shape()));
  return t[0];
}

std::span<const double> row(const ad::Tensor& t, std::size_t r, std::size_t cols) {
  return t.data().subspan(r * cols, cols);
}

std::span<double> row(ad::Tensor& t, std::size_t r, std::size_t cols) { return t.data().subspan(r * cols, cols); }

// Shared driver for the unary point maps (exp, log, project).
template <typename Fwd, typename Vjp>
ad::Var unary_map(const char* name, ad::Var x, ad::Var c, Fwd fwd, Vjp vjp) {
  const ad::Tensor& xv = x.value();
  const RowView rv = rows_of(xv, name);
  const double cv = scalar_of(c.value(), name);
  require_curvature(cv);
  ad::Tensor out(xv.shape());
  for (std::size_t r = 0; r < rv.rows; ++r) fwd(row(xv, r, rv.cols), cv, row(out, r, rv.cols));
  const ad::Tensor* xp = &xv;
  auto backward = [xp, rv, cv, vjp](const ad::Tensor& g, ad::GradSlots slots) {
    double gc = 0.0;
    std::vector<double> scratch(rv.cols);
    for (std::size_t r = 0; r < rv.rows; ++r) {
      std::span<double> gx = slots[0] ? row(*slots[0], r, rv.cols) : std::span<double>(scratch);
      gc += vjp(row(*xp, r, rv.cols), cv, row(g, r, rv.cols), gx);
    }
    if (slots[1]) (*slots[1])[0] += gc;
  };
  return x.tape().record(name, std::move(out), {x, c}, backward);
}

}  // namespace

ad::Var curvature(ad::Var raw) { return ad::add_scalar(ad::softplus(raw), kCurvatureFloor); }

ad::Var exp_map0(ad::Var v, ad::Var c) {
  return unary_map("exp_map0", v, c, kernel::exp_map0, kernel::exp_map0_vjp);
}

ad::Var log_map0(ad::Var y, ad::Var c) {
  return unary_map("log_map0", y, c, kernel::log_map0, kernel::log_map0_vjp);
}

ad::Var ball_project(ad::Var x, ad::Var c) {
  return unary_map("ball_project", x, c, kernel::ball_project, kernel::ball_project_vjp);
}

ad::Var mobius_add(ad::Var x, ad::Var y, ad::Var c) {
  const ad::Tensor& xv = x.value();
  const ad::Tensor& yv = y.value();
  if (xv.shape() != yv.shape()) {
    throw ShapeError("mobius_add: incompatible shapes " + ad::shape_str(xv.shape()) + " and " +
                     ad::shape_str(yv.shape()));
  }
  const RowView rv = rows_of(xv, "mobius_add");
  const double cv = scalar_of(c.value(), "mobius_add");
  require_curvature(cv);
  ad::Tensor out(xv.shape());
  for (std::size_t r = 0; r < rv.rows; ++r)
    kernel::mobius_add(row(xv, r, rv.cols), row(yv, r, rv.cols), cv, row(out, r, rv.cols));
  const ad::Tensor* xp = &xv;
  const ad::Tensor* yp = &yv;
  auto backward = [xp, yp, rv, cv](const ad::Tensor& g, ad::GradSlots slots) {
    double gc = 0.0;
    for (std::size_t r = 0; r < rv.rows; ++r) {
      std::span<double> gx = slots[0] ? row(*slots[0], r, rv.cols) : std::span<double>();
      std::span<double> gy = slots[1] ? row(*slots[1], r, rv.cols) : std::span<double>();
      gc += kernel::mobius_add_vjp(row(*xp, r, rv.cols), row(*yp, r, rv.cols), cv, row(g, r, rv.cols), gx, gy);
    }
    if (slots[2]) (*slots[2])[0] += gc;
  };
  return x.tape().record("mobius_add", std::move(out), {x, y, c}, backward);
}

ad::Var mobius_scalar(ad::Var r, ad::Var x, ad::Var c) {
  const ad::Tensor& xv = x.value();
  const RowView rv = rows_of(xv, "mobius_scalar");
  const double rs = scalar_of(r.value(), "mobius_scalar");
  const double cv = scalar_of(c.value(), "mobius_scalar");
  require_curvature(cv);
  ad::Tensor out(xv.shape());
  for (std::size_t i = 0; i < rv.rows; ++i) kernel::mobius_scalar(rs, row(xv, i, rv.cols), cv, row(out, i, rv.cols));
  const ad::Tensor* xp = &xv;
  auto backward = [xp, rv, rs, cv](const ad::Tensor& g, ad::GradSlots slots) {
    double gr = 0.0, gc = 0.0;
    std::vector<double> scratch(rv.cols);
    for (std::size_t i = 0; i < rv.rows; ++i) {
      std::span<double> gx = slots[1] ? row(*slots[1], i, rv.cols) : std::span<double>(scratch);
      const kernel::ScalarVjp part = kernel::mobius_scalar_vjp(rs, row(*xp, i, rv.cols), cv, row(g, i, rv.cols), gx);
      gr += part.r;
      gc += part.c;
    }
    if (slots[0]) (*slots[0])[0] += gr;
    if (slots[2]) (*slots[2])[0] += gc;
  };
  return x.tape().record("mobius_scalar", std::move(out), {r, x, c}, backward);
}

ad::Var transport(ad::Var x, ad::Var c_from, ad::Var c_to) {
  if (c_from.id() == c_to.id() && &c_from.tape() == &c_to.tape()) return x;
  return exp_map0(log_map0(x, c_from), c_to);
}

double max_scaled_norm(const ad::Tensor& points, double c) {
  const RowView rv = rows_of(points, "max_scaled_norm");
  double worst = 0.0;
  for (std::size_t r = 0; r < rv.rows; ++r) worst = std::max(worst, std::sqrt(c) * norm(row(points, r, rv.cols)));
  return worst;
}

}  // namespace hydra::geo
