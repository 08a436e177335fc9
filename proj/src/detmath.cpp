#include "promptvid/detmath.hpp"

#include <cmath>
#include <limits>

namespace promptvid::detmath {

namespace {

// ln(2) split into a high part exact in double and a low correction.
constexpr double kLn2Hi = 6.93147180369123816490e-01;
constexpr double kLn2Lo = 1.90821492927058770002e-10;
constexpr double kLn2 = 0.6931471805599453;
constexpr double kInvLn2 = 1.4426950408889634;

// pi/2 split into three parts for Cody-Waite range reduction.
constexpr double kPio2Hi = 1.57079632673412561417e+00;
constexpr double kPio2Mid = 6.07710050630396597660e-11;
constexpr double kPio2Lo = 2.02226624879595063154e-21;
constexpr double kTwoOverPi = 6.36619772367581382433e-01;

// sin(r) on |r| <= pi/4, Taylor series in fixed evaluation order.
double sin_poly(double r) {
    double r2 = r * r;
    double p = -1.0 / 6227020800.0; // -1/13!
    p = p * r2 + 1.0 / 39916800.0;
    p = p * r2 - 1.0 / 362880.0;
    p = p * r2 + 1.0 / 5040.0;
    p = p * r2 - 1.0 / 120.0;
    p = p * r2 + 1.0 / 6.0;
    return r - r * r2 * p;
}

// cos(r) on |r| <= pi/4.
double cos_poly(double r) {
    double r2 = r * r;
    double p = 1.0 / 87178291200.0; // 1/14!
    p = p * r2 - 1.0 / 479001600.0;
    p = p * r2 + 1.0 / 3628800.0;
    p = p * r2 - 1.0 / 40320.0;
    p = p * r2 + 1.0 / 720.0;
    p = p * r2 - 1.0 / 24.0;
    p = p * r2 + 1.0 / 2.0;
    return 1.0 - r2 * p;
}

// Reduces x to r with x = k*(pi/2) + r, |r| <= pi/4 + eps; returns k mod 4.
int reduce_pio2(double x, double& r) {
    double fk = std::floor(x * kTwoOverPi + 0.5);
    r = ((x - fk * kPio2Hi) - fk * kPio2Mid) - fk * kPio2Lo;
    double m = fk - 4.0 * std::floor(fk * 0.25);
    return static_cast<int>(m);
}

} // namespace

double det_exp(double x) {
    if (std::isnan(x)) return x;
    if (x > 709.0) return std::numeric_limits<double>::infinity();
    if (x < -745.0) return 0.0;
    double fk = std::floor(x * kInvLn2 + 0.5);
    double r = (x - fk * kLn2Hi) - fk * kLn2Lo;
    // exp(r) on |r| <= ln2/2, Taylor to degree 13.
    double p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    return std::ldexp(p, static_cast<int>(fk));
}

double det_log(double x) {
    if (std::isnan(x)) return x;
    if (x < 0.0) return std::numeric_limits<double>::quiet_NaN();
    if (x == 0.0) return -std::numeric_limits<double>::infinity();
    if (std::isinf(x)) return x;
    int e = 0;
    double m = std::frexp(x, &e); // m in [0.5, 1)
    if (m < 0.70710678118654752440) {
        m *= 2.0;
        e -= 1;
    }
    // ln(m) via atanh series: t = (m-1)/(m+1), |t| <= 0.1716.
    double t = (m - 1.0) / (m + 1.0);
    double t2 = t * t;
    double p = 1.0 / 19.0;
    p = p * t2 + 1.0 / 17.0;
    p = p * t2 + 1.0 / 15.0;
    p = p * t2 + 1.0 / 13.0;
    p = p * t2 + 1.0 / 11.0;
    p = p * t2 + 1.0 / 9.0;
    p = p * t2 + 1.0 / 7.0;
    p = p * t2 + 1.0 / 5.0;
    p = p * t2 + 1.0 / 3.0;
    p = p * t2 + 1.0;
    double lnm = 2.0 * t * p;
    return lnm + static_cast<double>(e) * kLn2Hi + static_cast<double>(e) * kLn2Lo;
}

double det_sin(double x) {
    if (std::isnan(x) || std::isinf(x)) return std::numeric_limits<double>::quiet_NaN();
    double r;
    switch (reduce_pio2(x, r)) {
        case 0: return sin_poly(r);
        case 1: return cos_poly(r);
        case 2: return -sin_poly(r);
        default: return -cos_poly(r);
    }
}

double det_cos(double x) {
    if (std::isnan(x) || std::isinf(x)) return std::numeric_limits<double>::quiet_NaN();
    double r;
    switch (reduce_pio2(x, r)) {
        case 0: return cos_poly(r);
        case 1: return -sin_poly(r);
        case 2: return -cos_poly(r);
        default: return sin_poly(r);
    }
}

double det_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + det_exp(-x));
    }
    double e = det_exp(x);
    return e / (1.0 + e);
}

} // namespace promptvid::detmath
