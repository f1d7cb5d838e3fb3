#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "flexssm/tensor.hpp"

namespace flexssm {

enum class ResizeMode { linear, bicubic };

// Interpolation operator materialized as an explicit sparse linear map over the
// leading axis. Endpoint-aligned sampling: output i reads source coordinate
// i*(src-1)/(dst-1); a single output reads the source midpoint. Same-size
// construction is the exact identity. Each row's weights sum to 1.
struct ResizeOp {
    std::int64_t src_len = 0;
    std::int64_t dst_len = 0;
    ResizeMode mode = ResizeMode::linear;
    SparseLinearMap map;
};

namespace detail {

// Catmull-Rom cubic (a = -0.5)
inline double cubic_weight(double d) {
    d = std::fabs(d);
    if (d <= 1.0) return (1.5 * d - 2.5) * d * d + 1.0;
    if (d < 2.0) return ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0;
    return 0.0;
}

inline void push_taps(SparseLinearMap& m, std::int64_t src_len, double coord, ResizeMode mode) {
    const std::int64_t i0 = std::int64_t(std::floor(coord));
    const double f = coord - double(i0);
    auto add_tap = [&](std::int64_t idx, double w) {
        if (w == 0.0) return;
        idx = std::min(std::max(idx, std::int64_t(0)), src_len - 1); // edge clamp
        // merge with an existing tap on the same source row, if any
        for (std::int64_t e = m.row_ptr.back(); e < std::int64_t(m.col.size()); ++e) {
            if (m.col[std::size_t(e)] == idx) {
                m.w[std::size_t(e)] += w;
                return;
            }
        }
        m.col.push_back(idx);
        m.w.push_back(w);
    };
    if (f == 0.0) {
        add_tap(i0, 1.0); // integer hit: exact
    } else if (mode == ResizeMode::linear) {
        add_tap(i0, 1.0 - f);
        add_tap(i0 + 1, f);
    } else {
        for (std::int64_t j = -1; j <= 2; ++j) add_tap(i0 + j, cubic_weight(f - double(j)));
    }
    m.row_ptr.push_back(std::int64_t(m.col.size()));
}

} // namespace detail

inline ResizeOp build_resize_1d(std::int64_t src_len, std::int64_t dst_len, ResizeMode mode) {
    if (src_len < 1 || dst_len < 1)
        throw std::invalid_argument("build_resize_1d: lengths must be positive");
    ResizeOp op;
    op.src_len = src_len;
    op.dst_len = dst_len;
    op.mode = mode;
    op.map.src_rows = src_len;
    op.map.dst_rows = dst_len;
    op.map.row_ptr = {0};
    if (src_len == dst_len) {
        for (std::int64_t i = 0; i < dst_len; ++i) {
            op.map.col.push_back(i);
            op.map.w.push_back(1.0);
            op.map.row_ptr.push_back(i + 1);
        }
        return op;
    }
    for (std::int64_t i = 0; i < dst_len; ++i) {
        const double coord = (dst_len == 1) ? double(src_len - 1) / 2.0
                                            : double(i) * double(src_len - 1) / double(dst_len - 1);
        detail::push_taps(op.map, src_len, coord, mode);
    }
    return op;
}

// 2-D resize over a row-major (src_h x src_w) grid as the tensor product of two
// 1-D operators; rows index the flattened grid
inline ResizeOp build_resize_2d(std::int64_t src_h, std::int64_t src_w, std::int64_t dst_h, std::int64_t dst_w,
                                ResizeMode mode) {
    const ResizeOp rows = build_resize_1d(src_h, dst_h, mode);
    const ResizeOp cols = build_resize_1d(src_w, dst_w, mode);
    ResizeOp op;
    op.src_len = src_h * src_w;
    op.dst_len = dst_h * dst_w;
    op.mode = mode;
    op.map.src_rows = src_h * src_w;
    op.map.dst_rows = dst_h * dst_w;
    op.map.row_ptr = {0};
    for (std::int64_t y = 0; y < dst_h; ++y) {
        for (std::int64_t x = 0; x < dst_w; ++x) {
            for (std::int64_t ey = rows.map.row_ptr[std::size_t(y)]; ey < rows.map.row_ptr[std::size_t(y) + 1]; ++ey) {
                for (std::int64_t ex = cols.map.row_ptr[std::size_t(x)]; ex < cols.map.row_ptr[std::size_t(x) + 1];
                     ++ex) {
                    op.map.col.push_back(rows.map.col[std::size_t(ey)] * src_w + cols.map.col[std::size_t(ex)]);
                    op.map.w.push_back(rows.map.w[std::size_t(ey)] * cols.map.w[std::size_t(ex)]);
                }
            }
            op.map.row_ptr.push_back(std::int64_t(op.map.col.size()));
        }
    }
    return op;
}

// plain (non-tape) application to a row-major buffer with `inner` values per row
template <typename S>
void apply_map_raw(const SparseLinearMap& m, const S* src, S* dst, std::int64_t inner) {
    for (std::int64_t r = 0; r < m.dst_rows; ++r) {
        S* out = dst + r * inner;
        for (std::int64_t i = 0; i < inner; ++i) out[i] = S(0);
        for (std::int64_t e = m.row_ptr[std::size_t(r)]; e < m.row_ptr[std::size_t(r) + 1]; ++e) {
            const S w = S(m.w[std::size_t(e)]);
            const S* in = src + m.col[std::size_t(e)] * inner;
            for (std::int64_t i = 0; i < inner; ++i) out[i] += w * in[i];
        }
    }
}

} // namespace flexssm
