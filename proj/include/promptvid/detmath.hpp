#pragma once

// Deterministic elementary functions.
//
// libm's exp/log/sin/cos are not guaranteed to be correctly rounded, so their
// results can differ between C library versions. Everything here is a fixed
// sequence of IEEE-754 double operations (+, -, *, /, sqrt, ldexp, floor),
// which makes results bit-identical on any platform with IEEE doubles.
// Accuracy is ~1 ulp worse than libm; all callers tolerate that.

namespace promptvid::detmath {

double det_exp(double x);
double det_log(double x);
double det_sin(double x);
double det_cos(double x);

// 1 / (1 + e^-x), overflow-safe on both tails.
double det_sigmoid(double x);

} // namespace promptvid::detmath
