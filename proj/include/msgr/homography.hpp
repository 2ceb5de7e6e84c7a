#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace msgr {

// Thrown when a homography (or the linear system defining one) collapses:
// callers either skip the sample or fall back to an identity warp.
struct DegenerateHomography : std::runtime_error {
    explicit DegenerateHomography(const std::string& what) : std::runtime_error("degenerate homography: " + what) {}
};

using Pt = std::array<double, 2>;

struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return {}; }

    double& operator()(int r, int c) { return m[static_cast<std::size_t>(r * 3 + c)]; }
    double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }

    bool finite() const {
        for (double v : m)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline Mat3 compose(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += a(i, k) * b(k, j);
            r(i, j) = acc;
        }
    return r;
}

inline Mat3 invert(const Mat3& h) {
    const auto& m = h.m;
    double c00 = m[4] * m[8] - m[5] * m[7];
    double c01 = m[5] * m[6] - m[3] * m[8];
    double c02 = m[3] * m[7] - m[4] * m[6];
    double det = m[0] * c00 + m[1] * c01 + m[2] * c02;
    Mat3 r;
    r.m = {c00, m[2] * m[7] - m[1] * m[8], m[1] * m[5] - m[2] * m[4],
           c01, m[0] * m[8] - m[2] * m[6], m[2] * m[3] - m[0] * m[5],
           c02, m[1] * m[6] - m[0] * m[7], m[0] * m[4] - m[1] * m[3]};
    double adj_scale = 0.0;
    for (double v : r.m) adj_scale = std::max(adj_scale, std::fabs(v));
    if (!std::isfinite(det) || std::fabs(det) < 1e-14 * adj_scale)
        throw DegenerateHomography("matrix is singular");
    for (double& v : r.m) v /= det;
    // Two Newton steps, X <- X (2I - H X), with the product taken in extended
    // precision, pull the residual toward machine precision even for poorly
    // scaled inputs.
    for (int pass = 0; pass < 2; ++pass) {
        long double hx[9], rn[9];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                long double acc = 0.0L;
                for (int k = 0; k < 3; ++k)
                    acc += static_cast<long double>(h(i, k)) * static_cast<long double>(r(k, j));
                hx[i * 3 + j] = -acc;
            }
        hx[0] += 2.0L;
        hx[4] += 2.0L;
        hx[8] += 2.0L;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                long double acc = 0.0L;
                for (int k = 0; k < 3; ++k) acc += static_cast<long double>(r(i, k)) * hx[k * 3 + j];
                rn[i * 3 + j] = acc;
            }
        for (int i = 0; i < 9; ++i) r.m[static_cast<std::size_t>(i)] = static_cast<double>(rn[i]);
    }
    if (!r.finite()) throw DegenerateHomography("matrix is singular");
    return r;
}

// Projective action on a point; the homogeneous scale must stay away from 0.
inline Pt apply_h(const Mat3& h, const Pt& p) {
    double w = h.m[6] * p[0] + h.m[7] * p[1] + h.m[8];
    if (!std::isfinite(w) || std::fabs(w) < 1e-12) throw DegenerateHomography("point maps to infinity");
    return {(h.m[0] * p[0] + h.m[1] * p[1] + h.m[2]) / w, (h.m[3] * p[0] + h.m[4] * p[1] + h.m[5]) / w};
}

namespace detail {

// In-place Gaussian elimination with partial pivoting, n <= 8 plus rhs.
inline void solve_inplace(double* a, double* b, int n) {
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::fabs(a[r * n + col]) > std::fabs(a[piv * n + col])) piv = r;
        if (std::fabs(a[piv * n + col]) < 1e-12) throw DegenerateHomography("linear system is rank deficient");
        if (piv != col) {
            for (int c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
            std::swap(b[col], b[piv]);
        }
        double inv = 1.0 / a[col * n + col];
        for (int r = col + 1; r < n; ++r) {
            double f = a[r * n + col] * inv;
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            b[r] -= f * b[col];
        }
    }
    for (int col = n - 1; col >= 0; --col) {
        double acc = b[col];
        for (int c = col + 1; c < n; ++c) acc -= a[col * n + c] * b[c];
        b[col] = acc / a[col * n + col];
    }
}

// Translate to the centroid and scale to RMS distance sqrt(2); keeps the DLT
// system well conditioned for image-scale coordinates.
inline Mat3 normalizer(const std::array<Pt, 4>& pts) {
    double mx = 0, my = 0;
    for (const auto& p : pts) {
        mx += p[0];
        my += p[1];
    }
    mx /= 4.0;
    my /= 4.0;
    double rms = 0.0;
    for (const auto& p : pts) rms += (p[0] - mx) * (p[0] - mx) + (p[1] - my) * (p[1] - my);
    rms = std::sqrt(rms / 4.0);
    if (rms < 1e-9) throw DegenerateHomography("coincident points");
    double s = std::sqrt(2.0) / rms;
    Mat3 t;
    t.m = {s, 0, -s * mx, 0, s, -s * my, 0, 0, 1};
    return t;
}

inline void build_dlt_system(const std::array<Pt, 4>& src, const std::array<Pt, 4>& dst, double* a, double* b) {
    std::fill(a, a + 64, 0.0);
    for (int i = 0; i < 4; ++i) {
        double X = src[static_cast<std::size_t>(i)][0], Y = src[static_cast<std::size_t>(i)][1];
        double x = dst[static_cast<std::size_t>(i)][0], y = dst[static_cast<std::size_t>(i)][1];
        double* r0 = a + (2 * i) * 8;
        double* r1 = a + (2 * i + 1) * 8;
        r0[0] = X;
        r0[1] = Y;
        r0[2] = 1;
        r0[6] = -x * X;
        r0[7] = -x * Y;
        r1[3] = X;
        r1[4] = Y;
        r1[5] = 1;
        r1[6] = -y * X;
        r1[7] = -y * Y;
        b[2 * i] = x;
        b[2 * i + 1] = y;
    }
}

// Iterative refinement of A g = b with the residual accumulated in extended
// precision, so the solution error floor drops well below cond(A) * eps.
inline void refine_solution(const double* a0, const double* b0, double* g, int passes) {
    for (int pass = 0; pass < passes; ++pass) {
        double r[8];
        for (int i = 0; i < 8; ++i) {
            long double acc = -static_cast<long double>(b0[i]);
            for (int j = 0; j < 8; ++j)
                acc += static_cast<long double>(a0[i * 8 + j]) * static_cast<long double>(g[j]);
            r[i] = static_cast<double>(acc);
        }
        double a[64];
        std::copy(a0, a0 + 64, a);
        solve_inplace(a, r, 8);
        for (int i = 0; i < 8; ++i) g[i] -= r[i];
    }
}

// Plain (unnormalized) 4-point solve with the bottom-right entry pinned to 1.
inline Mat3 dlt_solve_raw(const std::array<Pt, 4>& src, const std::array<Pt, 4>& dst) {
    double a0[64], b0[8];
    build_dlt_system(src, dst, a0, b0);
    double a[64], g[8];
    std::copy(a0, a0 + 64, a);
    std::copy(b0, b0 + 8, g);
    solve_inplace(a, g, 8);
    refine_solution(a0, b0, g, 2);
    Mat3 h;
    h.m = {g[0], g[1], g[2], g[3], g[4], g[5], g[6], g[7], 1.0};
    if (!h.finite()) throw DegenerateHomography("non-finite solution");
    return h;
}

} // namespace detail

// Homography taking src[i] to dst[i] exactly, bottom-right entry 1.
inline Mat3 dlt_solve(const std::array<Pt, 4>& src, const std::array<Pt, 4>& dst) {
    Mat3 ts = detail::normalizer(src);
    Mat3 td = detail::normalizer(dst);
    std::array<Pt, 4> ns, nd;
    for (int i = 0; i < 4; ++i) {
        ns[static_cast<std::size_t>(i)] = apply_h(ts, src[static_cast<std::size_t>(i)]);
        nd[static_cast<std::size_t>(i)] = apply_h(td, dst[static_cast<std::size_t>(i)]);
    }
    Mat3 hn = detail::dlt_solve_raw(ns, nd);
    Mat3 h = compose(invert(td), compose(hn, ts));
    double w = h.m[8];
    if (!std::isfinite(w) || std::fabs(w) < 1e-12) throw DegenerateHomography("unnormalizable solution");
    for (double& v : h.m) v /= w;
    // Polish the denormalized solution against the original correspondences.
    double a0[64], b0[8];
    detail::build_dlt_system(src, dst, a0, b0);
    double g[8];
    std::copy(h.m.begin(), h.m.begin() + 8, g);
    detail::refine_solution(a0, b0, g, 2);
    std::copy(g, g + 8, h.m.begin());
    if (!h.finite()) throw DegenerateHomography("non-finite solution");
    return h;
}

// Corner order everywhere: top-left, top-right, bottom-right, bottom-left,
// with pixel centers spanning [0, w-1] x [0, h-1].
inline std::array<Pt, 4> image_corners(int w, int h) {
    double W = w - 1.0, H = h - 1.0;
    return {Pt{0.0, 0.0}, Pt{W, 0.0}, Pt{W, H}, Pt{0.0, H}};
}

inline std::array<Pt, 4> shift_corners(const std::array<Pt, 4>& c, const std::array<double, 8>& offsets) {
    std::array<Pt, 4> r;
    for (int i = 0; i < 4; ++i)
        r[static_cast<std::size_t>(i)] = {c[static_cast<std::size_t>(i)][0] + offsets[static_cast<std::size_t>(2 * i)],
                                          c[static_cast<std::size_t>(i)][1] + offsets[static_cast<std::size_t>(2 * i + 1)]};
    return r;
}

// Homography mapping target-image coordinates into the reference plane, from
// the displacement of the four target corners. All-zero displacements admit
// the identity as the exact solution, so skip the solver there.
inline Mat3 offsets_to_h(const std::array<double, 8>& offsets, int w, int h) {
    bool zero = true;
    for (double v : offsets) zero = zero && v == 0.0;
    if (zero) return Mat3::identity();
    auto c = image_corners(w, h);
    return dlt_solve(c, shift_corners(c, offsets));
}

// ---------------------------------------------------------------------------
// Canvas: the integer-aligned bounding box, in reference-plane coordinates,
// of the reference extent plus the warped target extent. Canvas pixel p
// corresponds to reference-plane point p - (off_x, off_y)... offsets are the
// translation added to reference coordinates to land on the canvas.
// ---------------------------------------------------------------------------
struct Canvas {
    int width = 0, height = 0;
    double off_x = 0.0, off_y = 0.0; // integer-valued

    bool operator==(const Canvas& o) const {
        return width == o.width && height == o.height && off_x == o.off_x && off_y == o.off_y;
    }
};

inline Canvas canvas_for(const Mat3& h_tar_to_ref, int ref_w, int ref_h, int tar_w, int tar_h,
                         int max_extent = 8192) {
    double min_x = 0.0, min_y = 0.0, max_x = ref_w - 1.0, max_y = ref_h - 1.0;
    for (const auto& c : image_corners(tar_w, tar_h)) {
        Pt p = apply_h(h_tar_to_ref, c);
        if (!std::isfinite(p[0]) || !std::isfinite(p[1])) throw DegenerateHomography("corner maps to non-finite point");
        min_x = std::min(min_x, p[0]);
        min_y = std::min(min_y, p[1]);
        max_x = std::max(max_x, p[0]);
        max_y = std::max(max_y, p[1]);
    }
    Canvas cv;
    double fx = std::floor(min_x), fy = std::floor(min_y);
    cv.width = static_cast<int>(std::ceil(max_x) - fx) + 1;
    cv.height = static_cast<int>(std::ceil(max_y) - fy) + 1;
    cv.off_x = -fx;
    cv.off_y = -fy;
    if (cv.width > max_extent || cv.height > max_extent)
        throw DegenerateHomography("canvas exceeds maximum extent");
    return cv;
}

// Constant coordinate grid for sampling `src` content on the canvas through
// h_src_to_ref: coords(p) = h_src_to_ref^{-1} (p - offset).
inline TensorPtr warp_coords(const Mat3& h_src_to_ref, const Canvas& cv) {
    Mat3 inv = invert(h_src_to_ref);
    auto coords = Tensor::create({2, cv.height, cv.width});
    std::size_t n = static_cast<std::size_t>(cv.height) * cv.width;
    for (int y = 0; y < cv.height; ++y)
        for (int x = 0; x < cv.width; ++x) {
            double rx = x - cv.off_x, ry = y - cv.off_y;
            double w = inv.m[6] * rx + inv.m[7] * ry + inv.m[8];
            std::size_t i = static_cast<std::size_t>(y) * cv.width + x;
            if (!std::isfinite(w) || std::fabs(w) < 1e-12) {
                coords->data[i] = -1e9;
                coords->data[n + i] = -1e9;
                continue;
            }
            coords->data[i] = (inv.m[0] * rx + inv.m[1] * ry + inv.m[2]) / w;
            coords->data[n + i] = (inv.m[3] * rx + inv.m[4] * ry + inv.m[5]) / w;
        }
    return coords;
}

// Warp an image (or feature map) onto the canvas by a fixed homography.
inline GridSampleResult warp_image(const TensorPtr& x, const Mat3& h_src_to_ref, const Canvas& cv) {
    return grid_sample(x, warp_coords(h_src_to_ref, cv));
}

// Place an unwarped reference image onto the canvas (pure integer translation).
inline GridSampleResult place_image(const TensorPtr& x, const Canvas& cv) {
    return warp_image(x, Mat3::identity(), cv);
}

// ---------------------------------------------------------------------------
// Differentiable canvas grid as a function of the 8 corner offsets.
//
// The forward pass solves the 4-point system mapping the displaced target
// corners back to the plain corners (i.e. the inverse warp) without the
// conditioning transforms, so the solution is a smooth closed form of the
// offsets; the backward pass differentiates through the linear solve with
// dg/d\delta = -A^{-1} (dA/d\delta) g and chains through the perspective
// division at every canvas site.
// ---------------------------------------------------------------------------
inline TensorPtr homography_grid(const TensorPtr& offsets, int tar_w, int tar_h, const Canvas& cv) {
    detail::require(offsets->numel() == 8, "homography_grid: offsets must have 8 values");
    auto corners = image_corners(tar_w, tar_h);
    std::array<double, 8> off{};
    for (int i = 0; i < 8; ++i) off[static_cast<std::size_t>(i)] = offsets->data[static_cast<std::size_t>(i)];
    auto moved = shift_corners(corners, off);

    // g maps reference-plane points to target coordinates (already inverted).
    Mat3 g = detail::dlt_solve_raw(moved, corners);

    auto out = detail::make_node({2, cv.height, cv.width}, {offsets});
    std::size_t n = static_cast<std::size_t>(cv.height) * cv.width;
    for (int y = 0; y < cv.height; ++y)
        for (int x = 0; x < cv.width; ++x) {
            double rx = x - cv.off_x, ry = y - cv.off_y;
            double w = g.m[6] * rx + g.m[7] * ry + 1.0;
            std::size_t i = static_cast<std::size_t>(y) * cv.width + x;
            if (!std::isfinite(w) || std::fabs(w) < 1e-12) {
                out->data[i] = -1e9;
                out->data[n + i] = -1e9;
                continue;
            }
            out->data[i] = (g.m[0] * rx + g.m[1] * ry + g.m[2]) / w;
            out->data[n + i] = (g.m[3] * rx + g.m[4] * ry + g.m[5]) / w;
        }

    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr poff = offsets;
        Canvas cvc = cv;
        out->backward_fn = [o, poff, corners, moved, g, cvc, n]() {
            // dL/dg accumulated over all canvas sites.
            std::array<double, 8> dg{};
            for (int y = 0; y < cvc.height; ++y)
                for (int x = 0; x < cvc.width; ++x) {
                    std::size_t i = static_cast<std::size_t>(y) * cvc.width + x;
                    double gu = o->grad[i], gv = o->grad[n + i];
                    if (gu == 0.0 && gv == 0.0) continue;
                    double rx = x - cvc.off_x, ry = y - cvc.off_y;
                    double w = g.m[6] * rx + g.m[7] * ry + 1.0;
                    if (!std::isfinite(w) || std::fabs(w) < 1e-12) continue;
                    double iw = 1.0 / w;
                    double up = o->data[i], vp = o->data[n + i];
                    dg[0] += gu * rx * iw;
                    dg[1] += gu * ry * iw;
                    dg[2] += gu * iw;
                    dg[3] += gv * rx * iw;
                    dg[4] += gv * ry * iw;
                    dg[5] += gv * iw;
                    dg[6] += -(gu * up + gv * vp) * rx * iw;
                    dg[7] += -(gu * up + gv * vp) * ry * iw;
                }

            // Rebuild and factor A once; dg/d\delta_j = -A^{-1} (dA/d\delta_j) g.
            // Instead of eight explicit solves, use the adjoint: dL/d\delta_j =
            // dL/dg . dg/d\delta_j = -(A^{-T} dL/dg) . (dA/d\delta_j) g.
            double a[64] = {0};
            for (int i = 0; i < 4; ++i) {
                double X = moved[static_cast<std::size_t>(i)][0], Y = moved[static_cast<std::size_t>(i)][1];
                double x = corners[static_cast<std::size_t>(i)][0], y = corners[static_cast<std::size_t>(i)][1];
                double* r0 = a + (2 * i) * 8;
                double* r1 = a + (2 * i + 1) * 8;
                r0[0] = X;
                r0[1] = Y;
                r0[2] = 1;
                r0[6] = -x * X;
                r0[7] = -x * Y;
                r1[3] = X;
                r1[4] = Y;
                r1[5] = 1;
                r1[6] = -y * X;
                r1[7] = -y * Y;
            }
            // Solve A^T s = dL/dg.
            double at[64];
            for (int r = 0; r < 8; ++r)
                for (int c = 0; c < 8; ++c) at[r * 8 + c] = a[c * 8 + r];
            double s[8];
            for (int i = 0; i < 8; ++i) s[i] = dg[static_cast<std::size_t>(i)];
            detail::solve_inplace(at, s, 8);

            // (dA/d\delta_j) g has four nonzero structure per offset.
            for (int i = 0; i < 4; ++i) {
                double x = corners[static_cast<std::size_t>(i)][0], y = corners[static_cast<std::size_t>(i)][1];
                const double* gv = g.m.data();
                // d/dX_i: row 2i gets [1,0,0,0,0,0,-x,0] . g; row 2i+1 gets [0,0,0,1,0,0,-y,0] . g
                double r0 = gv[0] - x * gv[6];
                double r1 = gv[3] - y * gv[6];
                poff->grad[static_cast<std::size_t>(2 * i)] += -(s[2 * i] * r0 + s[2 * i + 1] * r1);
                // d/dY_i: row 2i gets [0,1,0,0,0,0,0,-x] . g; row 2i+1 gets [0,0,0,0,1,0,0,-y] . g
                double q0 = gv[1] - x * gv[7];
                double q1 = gv[4] - y * gv[7];
                poff->grad[static_cast<std::size_t>(2 * i + 1)] += -(s[2 * i] * q0 + s[2 * i + 1] * q1);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sidecar: line 1 holds the nine matrix entries row-major; an optional second
// line holds the eight corner offsets that produced it.
// ---------------------------------------------------------------------------
struct HSidecar {
    Mat3 h;
    std::optional<std::array<double, 8>> offsets;
};

inline std::string format_reals(const double* v, int n) {
    std::string s;
    char buf[40];
    for (int i = 0; i < n; ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", v[i]);
        if (i) s += ' ';
        s += buf;
    }
    return s;
}

inline void write_h_sidecar(const std::string& path, const Mat3& h,
                            const std::optional<std::array<double, 8>>& offsets = std::nullopt) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << format_reals(h.m.data(), 9) << "\n";
    if (offsets) f << format_reals(offsets->data(), 8) << "\n";
}

inline HSidecar read_h_sidecar(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    HSidecar sc;
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("empty homography file " + path);
    std::istringstream is(line);
    for (double& v : sc.h.m)
        if (!(is >> v)) throw std::runtime_error("malformed homography line in " + path);
    if (std::getline(f, line) && !line.empty()) {
        std::istringstream is2(line);
        std::array<double, 8> off{};
        for (double& v : off)
            if (!(is2 >> v)) throw std::runtime_error("malformed offsets line in " + path);
        sc.offsets = off;
    }
    return sc;
}

} // namespace msgr
