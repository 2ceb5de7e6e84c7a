#pragma once

// Image-quality metrics and the evaluation report format.
//
// Definitions (x is a [1,H,W] image with values in [0,1]):
//   RF  = sqrt( mean over j>=1 of (x[i,j] - x[i,j-1])^2 )
//   CF  = sqrt( mean over i>=1 of (x[i,j] - x[i-1,j])^2 )
//   SF  = sqrt(RF^2 + CF^2)                       spatial frequency
//   SD  = population standard deviation
//   AG  = mean over i<H-1, j<W-1 of sqrt((dx^2 + dy^2)/2)   average gradient,
//         dx = x[i,j+1]-x[i,j], dy = x[i+1,j]-x[i,j] (forward differences)
//   MSE = mean squared difference of [0,1] intensities (so also in [0,1])
// Empty difference sets (degenerate extents) contribute 0.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "homography.hpp"
#include "tensor.hpp"

namespace msgr {

struct MetricRow {
    std::string id;
    double sf = 0.0, sd = 0.0, ag = 0.0;
    std::optional<double> mse;
    std::optional<double> corner_err;
};

inline double metric_sf(const TensorPtr& x) {
    detail::require(x->shape.size() == 3 && x->shape[0] == 1, "metric_sf: expected [1,H,W]");
    int H = x->shape[1], W = x->shape[2];
    const double* p = x->data.data();
    double rf = 0.0, cf = 0.0;
    long rn = static_cast<long>(H) * (W - 1), cn = static_cast<long>(H - 1) * W;
    for (int i = 0; i < H; ++i)
        for (int j = 1; j < W; ++j) {
            double d = p[static_cast<std::size_t>(i) * W + j] - p[static_cast<std::size_t>(i) * W + j - 1];
            rf += d * d;
        }
    for (int i = 1; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double d = p[static_cast<std::size_t>(i) * W + j] - p[static_cast<std::size_t>(i - 1) * W + j];
            cf += d * d;
        }
    rf = rn > 0 ? rf / rn : 0.0;
    cf = cn > 0 ? cf / cn : 0.0;
    return std::sqrt(rf + cf);
}

inline double metric_sd(const TensorPtr& x) {
    detail::require(x->shape.size() == 3 && x->shape[0] == 1, "metric_sd: expected [1,H,W]");
    // Shifted two-pass so a constant image yields exactly zero.
    double n = static_cast<double>(x->data.size()), shift = x->data[0];
    double mean = 0.0;
    for (double v : x->data) mean += v - shift;
    mean /= n;
    double var = 0.0;
    for (double v : x->data) var += (v - shift - mean) * (v - shift - mean);
    return std::sqrt(var / n);
}

inline double metric_ag(const TensorPtr& x) {
    detail::require(x->shape.size() == 3 && x->shape[0] == 1, "metric_ag: expected [1,H,W]");
    int H = x->shape[1], W = x->shape[2];
    if (H < 2 || W < 2) return 0.0;
    const double* p = x->data.data();
    double acc = 0.0;
    for (int i = 0; i < H - 1; ++i)
        for (int j = 0; j < W - 1; ++j) {
            double dx = p[static_cast<std::size_t>(i) * W + j + 1] - p[static_cast<std::size_t>(i) * W + j];
            double dy = p[static_cast<std::size_t>(i + 1) * W + j] - p[static_cast<std::size_t>(i) * W + j];
            acc += std::sqrt(0.5 * (dx * dx + dy * dy));
        }
    return acc / (static_cast<double>(H - 1) * (W - 1));
}

inline double metric_mse(const TensorPtr& x, const TensorPtr& gt) {
    if (x->shape != gt->shape) throw std::invalid_argument("metric_mse: shape mismatch with ground truth");
    double acc = 0.0;
    for (std::size_t i = 0; i < x->data.size(); ++i) {
        double d = x->data[i] - gt->data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(x->data.size());
}

// Mean Euclidean distance, in pixels, between the predicted and ground-truth
// images of the four target corners on the reference plane.
inline double corner_error(const Mat3& h_pred, const Mat3& h_gt, int w, int h) {
    double acc = 0.0;
    for (const auto& c : image_corners(w, h)) {
        Pt a = apply_h(h_pred, c), b = apply_h(h_gt, c);
        acc += std::hypot(a[0] - b[0], a[1] - b[1]);
    }
    return acc / 4.0;
}

inline MetricRow compute_metrics(const TensorPtr& x, const TensorPtr& gt = nullptr) {
    MetricRow r;
    r.sf = metric_sf(x);
    r.sd = metric_sd(x);
    r.ag = metric_ag(x);
    if (gt) r.mse = metric_mse(x, gt);
    return r;
}

// ---------------------------------------------------------------------------
// Report file: tab-separated, header row, one sample per line, final mean
// line. Absent values print as "-" and are excluded from the means.
// ---------------------------------------------------------------------------
inline const char* kReportHeader = "id\tsf\tsd\tag\tmse\tcorner_err";

namespace detail {

inline std::string report_cell(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return buf;
}

} // namespace detail

inline std::string format_report(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os << kReportHeader << "\n";
    char buf[40];
    double sf = 0.0, sd = 0.0, ag = 0.0, mse = 0.0, ce = 0.0;
    long n_mse = 0, n_ce = 0;
    for (const auto& r : rows) {
        os << r.id << "\t";
        std::snprintf(buf, sizeof buf, "%.17g\t", r.sf);
        os << buf;
        std::snprintf(buf, sizeof buf, "%.17g\t", r.sd);
        os << buf;
        std::snprintf(buf, sizeof buf, "%.17g\t", r.ag);
        os << buf;
        os << detail::report_cell(r.mse) << "\t" << detail::report_cell(r.corner_err) << "\n";
        sf += r.sf;
        sd += r.sd;
        ag += r.ag;
        if (r.mse) {
            mse += *r.mse;
            ++n_mse;
        }
        if (r.corner_err) {
            ce += *r.corner_err;
            ++n_ce;
        }
    }
    double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
    MetricRow mean;
    mean.id = "mean";
    mean.sf = sf / n;
    mean.sd = sd / n;
    mean.ag = ag / n;
    if (n_mse > 0) mean.mse = mse / static_cast<double>(n_mse);
    if (n_ce > 0) mean.corner_err = ce / static_cast<double>(n_ce);
    os << mean.id << "\t";
    std::snprintf(buf, sizeof buf, "%.17g\t", mean.sf);
    os << buf;
    std::snprintf(buf, sizeof buf, "%.17g\t", mean.sd);
    os << buf;
    std::snprintf(buf, sizeof buf, "%.17g\t", mean.ag);
    os << buf;
    os << detail::report_cell(mean.mse) << "\t" << detail::report_cell(mean.corner_err) << "\n";
    return os.str();
}

inline void write_report(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << format_report(rows);
}

// Parses a report back, mean line included as the last row (id "mean").
inline std::vector<MetricRow> read_report(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::string line;
    if (!std::getline(f, line) || line != kReportHeader)
        throw std::runtime_error("malformed report header in " + path);
    std::vector<MetricRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        MetricRow r;
        std::string cell;
        if (!std::getline(is, r.id, '\t')) throw std::runtime_error("malformed report row: " + line);
        auto next = [&](const char* what) {
            if (!std::getline(is, cell, '\t')) throw std::runtime_error(std::string("missing ") + what + ": " + line);
            return cell;
        };
        r.sf = std::stod(next("sf"));
        r.sd = std::stod(next("sd"));
        r.ag = std::stod(next("ag"));
        std::string m = next("mse");
        if (m != "-") r.mse = std::stod(m);
        if (!std::getline(is, cell)) throw std::runtime_error("missing corner_err: " + line);
        if (cell != "-") r.corner_err = std::stod(cell);
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace msgr
