#include "scd/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "scd/half.hpp"

namespace scd {

double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace {

enum class OpKind : std::uint8_t {
    Leaf,
    Conv2d,
    Upsample,
    Gap,
    Gmp,
    ChannelMean,
    ChannelMax,
    Relu,
    Sigmoid,
    Abs,
    Softplus,
    Concat,
    Add,
    Sub,
    Mul,
    Affine,
    Slice,
    ReduceSum,
    ReduceMean,
    CosineMap,
    ScLoss,
    SscLoss,
    SemanticCe,
    ChangeBce,
};

constexpr double kCosineEps = 1e-12;

Shape4 broadcast_shape(const Shape4& a, const Shape4& b, const char* op) {
    auto one = [&](int x, int y) {
        if (x == y) return x;
        if (x == 1) return y;
        if (y == 1) return x;
        throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " vs " + b.str());
    };
    return Shape4{one(a.n, b.n), one(a.c, b.c), one(a.h, b.h), one(a.w, b.w)};
}

// Per-dimension element strides of a tensor viewed through a broadcast:
// zero where the tensor has extent 1.
struct BcastStrides {
    std::int64_t n, c, h, w;
    explicit BcastStrides(const Shape4& s)
        : n(s.n == 1 ? 0 : static_cast<std::int64_t>(s.c) * s.h * s.w),
          c(s.c == 1 ? 0 : static_cast<std::int64_t>(s.h) * s.w),
          h(s.h == 1 ? 0 : s.w),
          w(s.w == 1 ? 0 : 1) {}
};

// Sum `src` down to `target` over the dims where target has extent 1.
Tensor4 reduce_to(const Tensor4& src, const Shape4& t) {
    if (src.shape() == t) return src;
    Tensor4 out(t.n, t.c, t.h, t.w, 0.0);
    const Shape4& s = src.shape();
    const BcastStrides st(t);
    const double* p = src.data();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            double* o0 = out.data() + st.n * n + st.c * c;
            for (int y = 0; y < s.h; ++y) {
                double* oy = o0 + st.h * y;
                for (int x = 0; x < s.w; ++x) oy[st.w * x] += *p++;
            }
        }
    return out;
}

}  // namespace

struct Tape::Node {
    OpKind kind = OpKind::Leaf;
    std::vector<NodeId> inputs;
    Tensor4 value;
    // op attributes (only the relevant subset is used per kind)
    int stride = 1;
    int padding = 0;
    int factor = 2;
    int ch_from = 0;
    int ch_count = 0;
    double a = 1.0;  // affine scale / loss margin
    double b = 0.0;  // affine shift / loss tau
    int ignore_index = -1;
    std::shared_ptr<const LabelImage> labels;
    std::string name;  // parameter name; empty for everything else
    bool is_param = false;
};

Tape::Tape(Precision precision) : precision_(precision) {
    nodes_.reserve(64);
}

Tape::~Tape() = default;

const Tape::Node& Tape::node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }

int Tape::size() const { return static_cast<int>(nodes_.size()); }

const Tensor4& Tape::value(NodeId id) const { return node(id).value; }

NodeId Tape::push(Node&& n) {
    if (n.kind != OpKind::Leaf) n.value = eval(n);
    if (precision_ == Precision::Fp16Emulated) {
        quantize_in_place(n.value);
        forward_nonfinite_ += n.value.count_nonfinite();
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
}

NodeId Tape::param(const std::string& name, Tensor4 value) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.name = name;
    n.is_param = true;
    return push(std::move(n));
}

NodeId Tape::input(Tensor4 value) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Tape::conv2d(NodeId x, NodeId kernel, NodeId bias, int stride, int padding) {
    const Shape4& xs = value(x).shape();
    const Shape4& ks = value(kernel).shape();
    const Shape4& bs = value(bias).shape();
    if (stride < 1) throw ParamError("conv2d: stride must be >= 1");
    if (padding < 0) throw ParamError("conv2d: padding must be >= 0");
    if (xs.c != ks.c)
        throw ShapeError("conv2d: input channels " + std::to_string(xs.c) +
                         " != kernel c_in " + std::to_string(ks.c));
    if (bs.n != 1 || bs.c != ks.n || bs.h != 1 || bs.w != 1)
        throw ShapeError("conv2d: bias must be (1," + std::to_string(ks.n) + ",1,1), got " + bs.str());
    const int oh = (xs.h + 2 * padding - ks.h) / stride + 1;
    const int ow = (xs.w + 2 * padding - ks.w) / stride + 1;
    if (xs.h + 2 * padding - ks.h < 0 || xs.w + 2 * padding - ks.w < 0 || oh < 1 || ow < 1)
        throw ShapeError("conv2d: non-positive output dims for input " + xs.str());
    Node n;
    n.kind = OpKind::Conv2d;
    n.inputs = {x, kernel, bias};
    n.stride = stride;
    n.padding = padding;
    return push(std::move(n));
}

NodeId Tape::bilinear_upsample(NodeId x, int factor) {
    if (factor < 2) throw ParamError("bilinear_upsample: factor must be >= 2");
    Node n;
    n.kind = OpKind::Upsample;
    n.inputs = {x};
    n.factor = factor;
    return push(std::move(n));
}

NodeId Tape::global_avg_pool(NodeId x) {
    Node n;
    n.kind = OpKind::Gap;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::global_max_pool(NodeId x) {
    Node n;
    n.kind = OpKind::Gmp;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::channel_mean(NodeId x) {
    Node n;
    n.kind = OpKind::ChannelMean;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::channel_max(NodeId x) {
    Node n;
    n.kind = OpKind::ChannelMax;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::relu(NodeId x) {
    Node n;
    n.kind = OpKind::Relu;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId x) {
    Node n;
    n.kind = OpKind::Sigmoid;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::abs(NodeId x) {
    Node n;
    n.kind = OpKind::Abs;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::softplus(NodeId x) {
    Node n;
    n.kind = OpKind::Softplus;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::concat_channels(const std::vector<NodeId>& xs) {
    if (xs.empty()) throw ParamError("concat_channels: needs at least one input");
    const Shape4& first = value(xs[0]).shape();
    for (NodeId id : xs) {
        const Shape4& s = value(id).shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w)
            throw ShapeError("concat_channels: mismatched shape " + s.str() + " vs " + first.str());
    }
    Node n;
    n.kind = OpKind::Concat;
    n.inputs = xs;
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    broadcast_shape(value(a).shape(), value(b).shape(), "add");
    Node n;
    n.kind = OpKind::Add;
    n.inputs = {a, b};
    return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
    broadcast_shape(value(a).shape(), value(b).shape(), "sub");
    Node n;
    n.kind = OpKind::Sub;
    n.inputs = {a, b};
    return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
    broadcast_shape(value(a).shape(), value(b).shape(), "mul");
    Node n;
    n.kind = OpKind::Mul;
    n.inputs = {a, b};
    return push(std::move(n));
}

NodeId Tape::affine(NodeId x, double scale, double shift) {
    Node n;
    n.kind = OpKind::Affine;
    n.inputs = {x};
    n.a = scale;
    n.b = shift;
    return push(std::move(n));
}

NodeId Tape::slice_channels(NodeId x, int from, int count) {
    const Shape4& s = value(x).shape();
    if (from < 0 || count < 1 || from + count > s.c)
        throw ShapeError("slice_channels: window [" + std::to_string(from) + "," +
                         std::to_string(from + count) + ") outside " + s.str());
    Node n;
    n.kind = OpKind::Slice;
    n.inputs = {x};
    n.ch_from = from;
    n.ch_count = count;
    return push(std::move(n));
}

NodeId Tape::reduce_sum(NodeId x) {
    Node n;
    n.kind = OpKind::ReduceSum;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::reduce_mean(NodeId x) {
    Node n;
    n.kind = OpKind::ReduceMean;
    n.inputs = {x};
    return push(std::move(n));
}

NodeId Tape::cosine_map(NodeId a, NodeId b) {
    if (!(value(a).shape() == value(b).shape()))
        throw ShapeError("cosine_map: shapes differ: " + value(a).shape().str() + " vs " +
                         value(b).shape().str());
    Node n;
    n.kind = OpKind::CosineMap;
    n.inputs = {a, b};
    return push(std::move(n));
}

namespace {
void check_change_labels(const Tensor4& cos, const LabelImage& y, const char* op) {
    const Shape4& s = cos.shape();
    if (s.c != 1) throw ShapeError(std::string(op) + ": cosine map must have one channel");
    if (y.n != s.n || y.h != s.h || y.w != s.w)
        throw ShapeError(std::string(op) + ": label dims do not match cosine map");
    std::int64_t contributing = 0;
    for (int lab : y.v) {
        if (lab != 1 && lab != -1 && lab != 0)
            throw DataError(std::string(op) + ": change labels must be +1, -1 or 0 (ignore)");
        if (lab != 0) ++contributing;
    }
    if (contributing == 0)
        throw EmptyReductionError(std::string(op) + ": no contributing pixels");
}
}  // namespace

NodeId Tape::sc_loss(NodeId cos, const LabelImage& y, double margin) {
    check_change_labels(value(cos), y, "sc_loss");
    Node n;
    n.kind = OpKind::ScLoss;
    n.inputs = {cos};
    n.a = margin;
    n.labels = std::make_shared<LabelImage>(y);
    return push(std::move(n));
}

NodeId Tape::ssc_loss(NodeId cos, const LabelImage& y, double margin, double tau) {
    if (!(tau > 0.0)) throw ParamError("ssc_loss: tau must be > 0");
    check_change_labels(value(cos), y, "ssc_loss");
    Node n;
    n.kind = OpKind::SscLoss;
    n.inputs = {cos};
    n.a = margin;
    n.b = tau;
    n.labels = std::make_shared<LabelImage>(y);
    return push(std::move(n));
}

NodeId Tape::semantic_ce(NodeId logits, const LabelImage& labels, int ignore_index) {
    const Shape4& s = value(logits).shape();
    if (labels.n != s.n || labels.h != s.h || labels.w != s.w)
        throw ShapeError("semantic_ce: label dims do not match logits");
    std::int64_t contributing = 0;
    for (int lab : labels.v) {
        if (lab == ignore_index) continue;
        if (lab < 0 || lab >= s.c)
            throw DataError("semantic_ce: label " + std::to_string(lab) + " outside [0," +
                            std::to_string(s.c) + ")");
        ++contributing;
    }
    if (contributing == 0) throw EmptyReductionError("semantic_ce: all pixels ignored");
    Node n;
    n.kind = OpKind::SemanticCe;
    n.inputs = {logits};
    n.ignore_index = ignore_index;
    n.labels = std::make_shared<LabelImage>(labels);
    return push(std::move(n));
}

NodeId Tape::change_bce(NodeId logit, const LabelImage& targets) {
    const Shape4& s = value(logit).shape();
    if (s.c != 1) throw ShapeError("change_bce: logit must have one channel");
    if (targets.n != s.n || targets.h != s.h || targets.w != s.w)
        throw ShapeError("change_bce: target dims do not match logit");
    for (int t : targets.v)
        if (t != 0 && t != 1) throw DataError("change_bce: targets must be 0 or 1");
    Node n;
    n.kind = OpKind::ChangeBce;
    n.inputs = {logit};
    n.labels = std::make_shared<LabelImage>(targets);
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

namespace {

Tensor4 conv2d_forward(const Tensor4& x, const Tensor4& k, const Tensor4& bias,
                       int stride, int padding) {
    const Shape4& xs = x.shape();
    const Shape4& ks = k.shape();
    const int oh = (xs.h + 2 * padding - ks.h) / stride + 1;
    const int ow = (xs.w + 2 * padding - ks.w) / stride + 1;
    Tensor4 out(xs.n, ks.n, oh, ow);
    for (int n = 0; n < xs.n; ++n) {
        for (int co = 0; co < ks.n; ++co) {
            double* oplane = out.data() + out.index(n, co, 0, 0);
            const double bv = bias[co];
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i) oplane[i] = bv;
            for (int ci = 0; ci < ks.c; ++ci) {
                for (int ky = 0; ky < ks.h; ++ky) {
                    for (int kx = 0; kx < ks.w; ++kx) {
                        const double wv = k.at(co, ci, ky, kx);
                        if (wv == 0.0) continue;
                        // valid ox range so that ix = ox*stride + kx - padding is in bounds
                        const int lo_num = padding - kx;
                        const int ox_lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
                        const int hi_num = xs.w - 1 - kx + padding;
                        if (hi_num < 0) continue;
                        const int ox_hi = std::min(ow - 1, hi_num / stride);
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride + ky - padding;
                            if (iy < 0 || iy >= xs.h) continue;
                            const double* irow = x.data() + x.index(n, ci, iy, 0);
                            double* orow = oplane + static_cast<std::int64_t>(oy) * ow;
                            const int ix0 = ox_lo * stride + kx - padding;
                            if (stride == 1) {
                                const double* ip = irow + ix0;
                                for (int ox = ox_lo; ox <= ox_hi; ++ox, ++ip) orow[ox] += wv * *ip;
                            } else {
                                int ix = ix0;
                                for (int ox = ox_lo; ox <= ox_hi; ++ox, ix += stride)
                                    orow[ox] += wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

struct LerpCoord {
    int i0, i1;
    double w1;  // weight of i1; weight of i0 is 1 - w1
};

LerpCoord upsample_coord(int dst, int factor, int src_dim) {
    double s = (dst + 0.5) / factor - 0.5;
    if (s < 0.0) s = 0.0;
    const double smax = static_cast<double>(src_dim - 1);
    if (s > smax) s = smax;
    LerpCoord c;
    c.i0 = static_cast<int>(s);
    if (c.i0 > src_dim - 1) c.i0 = src_dim - 1;
    c.i1 = std::min(c.i0 + 1, src_dim - 1);
    c.w1 = s - c.i0;
    return c;
}

Tensor4 upsample_forward(const Tensor4& x, int factor) {
    const Shape4& s = x.shape();
    Tensor4 out(s.n, s.c, s.h * factor, s.w * factor);
    std::vector<LerpCoord> ys(static_cast<std::size_t>(s.h) * factor);
    std::vector<LerpCoord> xs(static_cast<std::size_t>(s.w) * factor);
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = upsample_coord(static_cast<int>(i), factor, s.h);
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = upsample_coord(static_cast<int>(i), factor, s.w);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int oy = 0; oy < s.h * factor; ++oy) {
                const LerpCoord& cy = ys[static_cast<std::size_t>(oy)];
                const double* r0 = x.data() + x.index(n, c, cy.i0, 0);
                const double* r1 = x.data() + x.index(n, c, cy.i1, 0);
                double* orow = out.data() + out.index(n, c, oy, 0);
                for (int ox = 0; ox < s.w * factor; ++ox) {
                    const LerpCoord& cx = xs[static_cast<std::size_t>(ox)];
                    const double top = r0[cx.i0] * (1.0 - cx.w1) + r0[cx.i1] * cx.w1;
                    const double bot = r1[cx.i0] * (1.0 - cx.w1) + r1[cx.i1] * cx.w1;
                    orow[ox] = top * (1.0 - cy.w1) + bot * cy.w1;
                }
            }
    return out;
}

Tensor4 cosine_forward(const Tensor4& a, const Tensor4& b) {
    const Shape4& s = a.shape();
    Tensor4 out(s.n, 1, s.h, s.w);
    for (int n = 0; n < s.n; ++n)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                double dot = 0.0, na2 = 0.0, nb2 = 0.0;
                for (int c = 0; c < s.c; ++c) {
                    const double av = a.at(n, c, y, x);
                    const double bv = b.at(n, c, y, x);
                    dot += av * bv;
                    na2 += av * av;
                    nb2 += bv * bv;
                }
                const double den = std::max(std::sqrt(na2) * std::sqrt(nb2), kCosineEps);
                out.at(n, 0, y, x) = std::clamp(dot / den, -1.0, 1.0);
            }
    return out;
}

std::int64_t count_contributing(const LabelImage& y) {
    std::int64_t k = 0;
    for (int lab : y.v)
        if (lab != 0) ++k;
    return k;
}

}  // namespace

Tensor4 Tape::eval(const Node& n) const {
    switch (n.kind) {
        case OpKind::Leaf:
            return n.value;
        case OpKind::Conv2d:
            return conv2d_forward(value(n.inputs[0]), value(n.inputs[1]), value(n.inputs[2]),
                                  n.stride, n.padding);
        case OpKind::Upsample:
            return upsample_forward(value(n.inputs[0]), n.factor);
        case OpKind::Gap: {
            const Tensor4& x = value(n.inputs[0]);
            const Shape4& s = x.shape();
            Tensor4 out(s.n, s.c, 1, 1);
            const double inv = 1.0 / (static_cast<double>(s.h) * s.w);
            for (int b = 0; b < s.n; ++b)
                for (int c = 0; c < s.c; ++c) {
                    double acc = 0.0;
                    const double* p = x.data() + x.index(b, c, 0, 0);
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.h) * s.w; ++i) acc += p[i];
                    out.at(b, c, 0, 0) = acc * inv;
                }
            return out;
        }
        case OpKind::Gmp: {
            const Tensor4& x = value(n.inputs[0]);
            const Shape4& s = x.shape();
            Tensor4 out(s.n, s.c, 1, 1);
            for (int b = 0; b < s.n; ++b)
                for (int c = 0; c < s.c; ++c) {
                    const double* p = x.data() + x.index(b, c, 0, 0);
                    double best = p[0];
                    for (std::int64_t i = 1; i < static_cast<std::int64_t>(s.h) * s.w; ++i)
                        best = std::max(best, p[i]);
                    out.at(b, c, 0, 0) = best;
                }
            return out;
        }
        case OpKind::ChannelMean: {
            const Tensor4& x = value(n.inputs[0]);
            const Shape4& s = x.shape();
            Tensor4 out(s.n, 1, s.h, s.w);
            const double inv = 1.0 / s.c;
            for (int b = 0; b < s.n; ++b)
                for (int c = 0; c < s.c; ++c)
                    for (int y = 0; y < s.h; ++y)
                        for (int xx = 0; xx < s.w; ++xx)
                            out.at(b, 0, y, xx) += x.at(b, c, y, xx) * inv;
            return out;
        }
        case OpKind::ChannelMax: {
            const Tensor4& x = value(n.inputs[0]);
            const Shape4& s = x.shape();
            Tensor4 out(s.n, 1, s.h, s.w);
            for (int b = 0; b < s.n; ++b)
                for (int y = 0; y < s.h; ++y)
                    for (int xx = 0; xx < s.w; ++xx) {
                        double best = x.at(b, 0, y, xx);
                        for (int c = 1; c < s.c; ++c) best = std::max(best, x.at(b, c, y, xx));
                        out.at(b, 0, y, xx) = best;
                    }
            return out;
        }
        case OpKind::Relu: {
            Tensor4 out = value(n.inputs[0]);
            for (double& v : out.vec()) v = v > 0.0 ? v : 0.0;
            return out;
        }
        case OpKind::Sigmoid: {
            Tensor4 out = value(n.inputs[0]);
            for (double& v : out.vec()) v = stable_sigmoid(v);
            return out;
        }
        case OpKind::Abs: {
            Tensor4 out = value(n.inputs[0]);
            for (double& v : out.vec()) v = std::fabs(v);
            return out;
        }
        case OpKind::Softplus: {
            Tensor4 out = value(n.inputs[0]);
            for (double& v : out.vec()) v = stable_softplus(v);
            return out;
        }
        case OpKind::Concat: {
            const Shape4& f = value(n.inputs[0]).shape();
            int cs = 0;
            for (NodeId id : n.inputs) cs += value(id).shape().c;
            Tensor4 out(f.n, cs, f.h, f.w);
            int coff = 0;
            for (NodeId id : n.inputs) {
                const Tensor4& x = value(id);
                const Shape4& s = x.shape();
                for (int b = 0; b < s.n; ++b)
                    for (int c = 0; c < s.c; ++c)
                        std::copy_n(x.data() + x.index(b, c, 0, 0),
                                    static_cast<std::size_t>(s.h) * s.w,
                                    out.data() + out.index(b, coff + c, 0, 0));
                coff += s.c;
            }
            return out;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            const Tensor4& a = value(n.inputs[0]);
            const Tensor4& b = value(n.inputs[1]);
            const Shape4 os = broadcast_shape(a.shape(), b.shape(), "binary");
            const BcastStrides sa(a.shape()), sb(b.shape());
            Tensor4 out(os.n, os.c, os.h, os.w);
            double* o = out.data();
            for (int bn = 0; bn < os.n; ++bn)
                for (int c = 0; c < os.c; ++c) {
                    const double* pa0 = a.data() + sa.n * bn + sa.c * c;
                    const double* pb0 = b.data() + sb.n * bn + sb.c * c;
                    for (int y = 0; y < os.h; ++y) {
                        const double* pa = pa0 + sa.h * y;
                        const double* pb = pb0 + sb.h * y;
                        if (n.kind == OpKind::Add) {
                            for (int x = 0; x < os.w; ++x) *o++ = pa[sa.w * x] + pb[sb.w * x];
                        } else if (n.kind == OpKind::Sub) {
                            for (int x = 0; x < os.w; ++x) *o++ = pa[sa.w * x] - pb[sb.w * x];
                        } else {
                            for (int x = 0; x < os.w; ++x) *o++ = pa[sa.w * x] * pb[sb.w * x];
                        }
                    }
                }
            return out;
        }
        case OpKind::Affine: {
            Tensor4 out = value(n.inputs[0]);
            for (double& v : out.vec()) v = n.a * v + n.b;
            return out;
        }
        case OpKind::Slice: {
            const Tensor4& x = value(n.inputs[0]);
            const Shape4& s = x.shape();
            Tensor4 out(s.n, n.ch_count, s.h, s.w);
            for (int b = 0; b < s.n; ++b)
                for (int c = 0; c < n.ch_count; ++c)
                    std::copy_n(x.data() + x.index(b, n.ch_from + c, 0, 0),
                                static_cast<std::size_t>(s.h) * s.w,
                                out.data() + out.index(b, c, 0, 0));
            return out;
        }
        case OpKind::ReduceSum:
        case OpKind::ReduceMean: {
            const Tensor4& x = value(n.inputs[0]);
            double acc = 0.0;
            for (double v : x.vec()) acc += v;
            if (n.kind == OpKind::ReduceMean) acc /= static_cast<double>(x.numel());
            Tensor4 out(1, 1, 1, 1);
            out[0] = acc;
            return out;
        }
        case OpKind::CosineMap:
            return cosine_forward(value(n.inputs[0]), value(n.inputs[1]));
        case OpKind::ScLoss:
        case OpKind::SscLoss: {
            const Tensor4& cos = value(n.inputs[0]);
            const LabelImage& y = *n.labels;
            const double m = n.a;
            const double tau = n.b;
            const double inv = 1.0 / static_cast<double>(count_contributing(y));
            double acc = 0.0;
            for (std::int64_t i = 0; i < y.numel(); ++i) {
                const int lab = y.v[static_cast<std::size_t>(i)];
                if (lab == 0) continue;
                const double c = cos[i];
                if (lab == 1) {
                    acc += 1.0 - c;
                } else if (n.kind == OpKind::ScLoss) {
                    acc += std::max(0.0, c - m);
                } else {
                    acc += tau * stable_softplus((c - m) / tau);
                }
            }
            Tensor4 out(1, 1, 1, 1);
            out[0] = acc * inv;
            return out;
        }
        case OpKind::SemanticCe: {
            const Tensor4& logits = value(n.inputs[0]);
            const Shape4& s = logits.shape();
            const LabelImage& lab = *n.labels;
            std::int64_t contributing = 0;
            double acc = 0.0;
            for (int b = 0; b < s.n; ++b)
                for (int y = 0; y < s.h; ++y)
                    for (int x = 0; x < s.w; ++x) {
                        const int t = lab.at(b, y, x);
                        if (t == n.ignore_index) continue;
                        ++contributing;
                        double mx = logits.at(b, 0, y, x);
                        for (int c = 1; c < s.c; ++c) mx = std::max(mx, logits.at(b, c, y, x));
                        double se = 0.0;
                        for (int c = 0; c < s.c; ++c) se += std::exp(logits.at(b, c, y, x) - mx);
                        acc += mx + std::log(se) - logits.at(b, t, y, x);
                    }
            Tensor4 out(1, 1, 1, 1);
            out[0] = acc / static_cast<double>(contributing);
            return out;
        }
        case OpKind::ChangeBce: {
            const Tensor4& logit = value(n.inputs[0]);
            const LabelImage& t = *n.labels;
            double acc = 0.0;
            for (std::int64_t i = 0; i < logit.numel(); ++i) {
                const double x = logit[i];
                const double tv = static_cast<double>(t.v[static_cast<std::size_t>(i)]);
                acc += std::max(x, 0.0) - x * tv + std::log1p(std::exp(-std::fabs(x)));
            }
            Tensor4 out(1, 1, 1, 1);
            out[0] = acc / static_cast<double>(logit.numel());
            return out;
        }
    }
    throw ParamError("eval: unknown op");
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

void conv2d_backward(const Tensor4& x, const Tensor4& k, int stride, int padding,
                     const Tensor4& dy, Tensor4& dx, Tensor4& dk, Tensor4& db) {
    const Shape4& xs = x.shape();
    const Shape4& ks = k.shape();
    const Shape4& os = dy.shape();
    for (int n = 0; n < xs.n; ++n) {
        for (int co = 0; co < ks.n; ++co) {
            const double* dplane = dy.data() + dy.index(n, co, 0, 0);
            {
                double acc = 0.0;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(os.h) * os.w; ++i)
                    acc += dplane[i];
                db[co] += acc;
            }
            for (int ci = 0; ci < ks.c; ++ci) {
                for (int ky = 0; ky < ks.h; ++ky) {
                    for (int kx = 0; kx < ks.w; ++kx) {
                        const int lo_num = padding - kx;
                        const int ox_lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
                        const int hi_num = xs.w - 1 - kx + padding;
                        if (hi_num < 0) continue;
                        const int ox_hi = std::min(os.w - 1, hi_num / stride);
                        const double wv = k.at(co, ci, ky, kx);
                        double wacc = 0.0;
                        for (int oy = 0; oy < os.h; ++oy) {
                            const int iy = oy * stride + ky - padding;
                            if (iy < 0 || iy >= xs.h) continue;
                            const double* irow = x.data() + x.index(n, ci, iy, 0);
                            double* dxrow = dx.data() + dx.index(n, ci, iy, 0);
                            const double* drow = dplane + static_cast<std::int64_t>(oy) * os.w;
                            int ix = ox_lo * stride + kx - padding;
                            for (int ox = ox_lo; ox <= ox_hi; ++ox, ix += stride) {
                                const double g = drow[ox];
                                wacc += g * irow[ix];
                                dxrow[ix] += g * wv;
                            }
                        }
                        dk.at(co, ci, ky, kx) += wacc;
                    }
                }
            }
        }
    }
}

void upsample_backward(const Shape4& s, int factor, const Tensor4& dy, Tensor4& dx) {
    std::vector<LerpCoord> ys(static_cast<std::size_t>(s.h) * factor);
    std::vector<LerpCoord> xs(static_cast<std::size_t>(s.w) * factor);
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = upsample_coord(static_cast<int>(i), factor, s.h);
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = upsample_coord(static_cast<int>(i), factor, s.w);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int oy = 0; oy < s.h * factor; ++oy) {
                const LerpCoord& cy = ys[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < s.w * factor; ++ox) {
                    const LerpCoord& cx = xs[static_cast<std::size_t>(ox)];
                    const double g = dy.at(n, c, oy, ox);
                    dx.at(n, c, cy.i0, cx.i0) += g * (1.0 - cy.w1) * (1.0 - cx.w1);
                    dx.at(n, c, cy.i0, cx.i1) += g * (1.0 - cy.w1) * cx.w1;
                    dx.at(n, c, cy.i1, cx.i0) += g * cy.w1 * (1.0 - cx.w1);
                    dx.at(n, c, cy.i1, cx.i1) += g * cy.w1 * cx.w1;
                }
            }
}

void cosine_backward(const Tensor4& a, const Tensor4& b, const Tensor4& dy,
                     Tensor4& da, Tensor4& db) {
    const Shape4& s = a.shape();
    for (int n = 0; n < s.n; ++n)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const double g = dy.at(n, 0, y, x);
                if (g == 0.0) continue;
                double dot = 0.0, na2 = 0.0, nb2 = 0.0;
                for (int c = 0; c < s.c; ++c) {
                    const double av = a.at(n, c, y, x);
                    const double bv = b.at(n, c, y, x);
                    dot += av * bv;
                    na2 += av * av;
                    nb2 += bv * bv;
                }
                const double prod = std::sqrt(na2) * std::sqrt(nb2);
                if (prod > kCosineEps) {
                    const double raw = dot / prod;
                    if (raw >= 1.0 || raw <= -1.0) continue;  // clamp boundary: zero gradient
                    for (int c = 0; c < s.c; ++c) {
                        const double av = a.at(n, c, y, x);
                        const double bv = b.at(n, c, y, x);
                        da.at(n, c, y, x) += g * (bv / prod - raw * av / na2);
                        db.at(n, c, y, x) += g * (av / prod - raw * bv / nb2);
                    }
                } else {
                    const double raw = dot / kCosineEps;
                    if (raw >= 1.0 || raw <= -1.0) continue;
                    for (int c = 0; c < s.c; ++c) {
                        da.at(n, c, y, x) += g * b.at(n, c, y, x) / kCosineEps;
                        db.at(n, c, y, x) += g * a.at(n, c, y, x) / kCosineEps;
                    }
                }
            }
}

}  // namespace

GradReport Tape::backward(NodeId loss) const {
    return backward_scaled(loss, 1.0, false);
}

GradReport Tape::backward_scaled(NodeId loss, double loss_scale, bool quantize_adjoints) const {
    const Node& ln = node(loss);
    if (!(ln.value.shape() == Shape4{1, 1, 1, 1}))
        throw ParamError("backward: loss node must be scalar (1,1,1,1), got " +
                         ln.value.shape().str());

    GradReport report;
    std::vector<Tensor4> adj(nodes_.size());
    auto touch = [&](NodeId id) -> Tensor4& {
        Tensor4& t = adj[static_cast<std::size_t>(id)];
        if (t.empty()) {
            const Shape4& s = node(id).value.shape();
            t = Tensor4(s.n, s.c, s.h, s.w, 0.0);
        }
        return t;
    };
    touch(loss)[0] = loss_scale;

    for (NodeId u = loss; u >= 0; --u) {
        Tensor4& gu = adj[static_cast<std::size_t>(u)];
        if (gu.empty()) continue;
        if (quantize_adjoints) {
            quantize_in_place(gu);
            report.nonfinite_count += gu.count_nonfinite();
        }
        const Node& n = node(u);
        switch (n.kind) {
            case OpKind::Leaf:
                break;
            case OpKind::Conv2d: {
                conv2d_backward(value(n.inputs[0]), value(n.inputs[1]), n.stride, n.padding, gu,
                                touch(n.inputs[0]), touch(n.inputs[1]), touch(n.inputs[2]));
                break;
            }
            case OpKind::Upsample:
                upsample_backward(value(n.inputs[0]).shape(), n.factor, gu, touch(n.inputs[0]));
                break;
            case OpKind::Gap: {
                const Shape4& s = value(n.inputs[0]).shape();
                Tensor4& dx = touch(n.inputs[0]);
                const double inv = 1.0 / (static_cast<double>(s.h) * s.w);
                for (int b = 0; b < s.n; ++b)
                    for (int c = 0; c < s.c; ++c) {
                        const double g = gu.at(b, c, 0, 0) * inv;
                        double* p = dx.data() + dx.index(b, c, 0, 0);
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.h) * s.w; ++i)
                            p[i] += g;
                    }
                break;
            }
            case OpKind::Gmp: {
                const Tensor4& x = value(n.inputs[0]);
                const Shape4& s = x.shape();
                Tensor4& dx = touch(n.inputs[0]);
                for (int b = 0; b < s.n; ++b)
                    for (int c = 0; c < s.c; ++c) {
                        const double* p = x.data() + x.index(b, c, 0, 0);
                        std::int64_t best = 0;
                        for (std::int64_t i = 1; i < static_cast<std::int64_t>(s.h) * s.w; ++i)
                            if (p[i] > p[best]) best = i;
                        dx.data()[dx.index(b, c, 0, 0) + best] += gu.at(b, c, 0, 0);
                    }
                break;
            }
            case OpKind::ChannelMean: {
                const Shape4& s = value(n.inputs[0]).shape();
                Tensor4& dx = touch(n.inputs[0]);
                const double inv = 1.0 / s.c;
                for (int b = 0; b < s.n; ++b)
                    for (int c = 0; c < s.c; ++c)
                        for (int y = 0; y < s.h; ++y)
                            for (int x = 0; x < s.w; ++x)
                                dx.at(b, c, y, x) += gu.at(b, 0, y, x) * inv;
                break;
            }
            case OpKind::ChannelMax: {
                const Tensor4& x = value(n.inputs[0]);
                const Shape4& s = x.shape();
                Tensor4& dx = touch(n.inputs[0]);
                for (int b = 0; b < s.n; ++b)
                    for (int y = 0; y < s.h; ++y)
                        for (int xx = 0; xx < s.w; ++xx) {
                            int best = 0;
                            for (int c = 1; c < s.c; ++c)
                                if (x.at(b, c, y, xx) > x.at(b, best, y, xx)) best = c;
                            dx.at(b, best, y, xx) += gu.at(b, 0, y, xx);
                        }
                break;
            }
            case OpKind::Relu: {
                const Tensor4& x = value(n.inputs[0]);
                Tensor4& dx = touch(n.inputs[0]);
                for (std::int64_t i = 0; i < x.numel(); ++i)
                    if (x[i] > 0.0) dx[i] += gu[i];
                break;
            }
            case OpKind::Sigmoid: {
                const Tensor4& out = n.value;
                Tensor4& dx = touch(n.inputs[0]);
                for (std::int64_t i = 0; i < out.numel(); ++i)
                    dx[i] += gu[i] * out[i] * (1.0 - out[i]);
                break;
            }
            case OpKind::Abs: {
                const Tensor4& x = value(n.inputs[0]);
                Tensor4& dx = touch(n.inputs[0]);
                for (std::int64_t i = 0; i < x.numel(); ++i) {
                    if (x[i] > 0.0) dx[i] += gu[i];
                    else if (x[i] < 0.0) dx[i] -= gu[i];
                }
                break;
            }
            case OpKind::Softplus: {
                const Tensor4& x = value(n.inputs[0]);
                Tensor4& dx = touch(n.inputs[0]);
                for (std::int64_t i = 0; i < x.numel(); ++i)
                    dx[i] += gu[i] * stable_sigmoid(x[i]);
                break;
            }
            case OpKind::Concat: {
                int coff = 0;
                for (NodeId id : n.inputs) {
                    const Shape4& s = value(id).shape();
                    Tensor4& dx = touch(id);
                    for (int b = 0; b < s.n; ++b)
                        for (int c = 0; c < s.c; ++c) {
                            const double* g = gu.data() + gu.index(b, coff + c, 0, 0);
                            double* p = dx.data() + dx.index(b, c, 0, 0);
                            for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.h) * s.w; ++i)
                                p[i] += g[i];
                        }
                    coff += s.c;
                }
                break;
            }
            case OpKind::Add: {
                Tensor4& da = touch(n.inputs[0]);
                Tensor4& db = touch(n.inputs[1]);
                const Tensor4 ra = reduce_to(gu, da.shape());
                for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += ra[i];
                const Tensor4 rb = reduce_to(gu, db.shape());
                for (std::int64_t i = 0; i < db.numel(); ++i) db[i] += rb[i];
                break;
            }
            case OpKind::Sub: {
                Tensor4& da = touch(n.inputs[0]);
                Tensor4& db = touch(n.inputs[1]);
                const Tensor4 ra = reduce_to(gu, da.shape());
                for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += ra[i];
                const Tensor4 rb = reduce_to(gu, db.shape());
                for (std::int64_t i = 0; i < db.numel(); ++i) db[i] -= rb[i];
                break;
            }
            case OpKind::Mul: {
                const Tensor4& a = value(n.inputs[0]);
                const Tensor4& b = value(n.inputs[1]);
                const Shape4& os = n.value.shape();
                Tensor4& da = touch(n.inputs[0]);
                Tensor4& db = touch(n.inputs[1]);
                const BcastStrides sa(a.shape()), sb(b.shape());
                const double* g = gu.data();
                for (int bn = 0; bn < os.n; ++bn)
                    for (int c = 0; c < os.c; ++c) {
                        const std::int64_t base_a = sa.n * bn + sa.c * c;
                        const std::int64_t base_b = sb.n * bn + sb.c * c;
                        for (int y = 0; y < os.h; ++y) {
                            const double* pa = a.data() + base_a + sa.h * y;
                            const double* pb = b.data() + base_b + sb.h * y;
                            double* qa = da.data() + base_a + sa.h * y;
                            double* qb = db.data() + base_b + sb.h * y;
                            for (int x = 0; x < os.w; ++x, ++g) {
                                qa[sa.w * x] += *g * pb[sb.w * x];
                                qb[sb.w * x] += *g * pa[sa.w * x];
                            }
                        }
                    }
                break;
            }
            case OpKind::Affine: {
                Tensor4& dx = touch(n.inputs[0]);
                for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += gu[i] * n.a;
                break;
            }
            case OpKind::Slice: {
                const Shape4& s = value(n.inputs[0]).shape();
                Tensor4& dx = touch(n.inputs[0]);
                for (int b = 0; b < s.n; ++b)
                    for (int c = 0; c < n.ch_count; ++c) {
                        const double* g = gu.data() + gu.index(b, c, 0, 0);
                        double* p = dx.data() + dx.index(b, n.ch_from + c, 0, 0);
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.h) * s.w; ++i)
                            p[i] += g[i];
                    }
                break;
            }
            case OpKind::ReduceSum: {
                Tensor4& dx = touch(n.inputs[0]);
                const double g = gu[0];
                for (double& v : dx.vec()) v += g;
                break;
            }
            case OpKind::ReduceMean: {
                Tensor4& dx = touch(n.inputs[0]);
                const double g = gu[0] / static_cast<double>(dx.numel());
                for (double& v : dx.vec()) v += g;
                break;
            }
            case OpKind::CosineMap:
                cosine_backward(value(n.inputs[0]), value(n.inputs[1]), gu,
                                touch(n.inputs[0]), touch(n.inputs[1]));
                break;
            case OpKind::ScLoss:
            case OpKind::SscLoss: {
                const Tensor4& cos = value(n.inputs[0]);
                const LabelImage& y = *n.labels;
                const double g = gu[0] / static_cast<double>(count_contributing(y));
                Tensor4& dc = touch(n.inputs[0]);
                for (std::int64_t i = 0; i < cos.numel(); ++i) {
                    const int lab = y.v[static_cast<std::size_t>(i)];
                    if (lab == 0) continue;
                    if (lab == 1) {
                        dc[i] -= g;
                    } else if (n.kind == OpKind::ScLoss) {
                        if (cos[i] > n.a) dc[i] += g;
                    } else {
                        dc[i] += g * stable_sigmoid((cos[i] - n.a) / n.b);
                    }
                }
                break;
            }
            case OpKind::SemanticCe: {
                const Tensor4& logits = value(n.inputs[0]);
                const Shape4& s = logits.shape();
                const LabelImage& lab = *n.labels;
                std::int64_t contributing = 0;
                for (int t : lab.v)
                    if (t != n.ignore_index) ++contributing;
                const double g = gu[0] / static_cast<double>(contributing);
                Tensor4& dx = touch(n.inputs[0]);
                for (int b = 0; b < s.n; ++b)
                    for (int y = 0; y < s.h; ++y)
                        for (int x = 0; x < s.w; ++x) {
                            const int t = lab.at(b, y, x);
                            if (t == n.ignore_index) continue;
                            double mx = logits.at(b, 0, y, x);
                            for (int c = 1; c < s.c; ++c) mx = std::max(mx, logits.at(b, c, y, x));
                            double se = 0.0;
                            for (int c = 0; c < s.c; ++c) se += std::exp(logits.at(b, c, y, x) - mx);
                            for (int c = 0; c < s.c; ++c) {
                                const double p = std::exp(logits.at(b, c, y, x) - mx) / se;
                                dx.at(b, c, y, x) += g * (p - (c == t ? 1.0 : 0.0));
                            }
                        }
                break;
            }
            case OpKind::ChangeBce: {
                const Tensor4& logit = value(n.inputs[0]);
                const LabelImage& t = *n.labels;
                const double g = gu[0] / static_cast<double>(logit.numel());
                Tensor4& dx = touch(n.inputs[0]);
                for (std::int64_t i = 0; i < logit.numel(); ++i)
                    dx[i] += g * (stable_sigmoid(logit[i]) -
                                  static_cast<double>(t.v[static_cast<std::size_t>(i)]));
                break;
            }
        }
    }

    const double inv_scale = 1.0 / loss_scale;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (!n.is_param) continue;
        Tensor4 g = adj[i].empty()
                        ? Tensor4(n.value.shape().n, n.value.shape().c, n.value.shape().h,
                                  n.value.shape().w, 0.0)
                        : std::move(adj[i]);
        if (loss_scale != 1.0)
            for (double& v : g.vec()) v *= inv_scale;
        for (double v : g.vec()) {
            const double av = std::fabs(v);
            if (av > report.max_abs_grad) report.max_abs_grad = av;
        }
        report.grads.emplace(n.name, std::move(g));
    }
    return report;
}

void Tape::poke_param(NodeId leaf, std::int64_t entry, double v) {
    Node& n = nodes_[static_cast<std::size_t>(leaf)];
    n.value[entry] = v;
    recompute_dependents(leaf);
}

void Tape::recompute_dependents(NodeId leaf) {
    std::vector<char> dep(nodes_.size(), 0);
    dep[static_cast<std::size_t>(leaf)] = 1;
    for (std::size_t i = static_cast<std::size_t>(leaf) + 1; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        bool touched = false;
        for (NodeId in : n.inputs)
            if (dep[static_cast<std::size_t>(in)]) {
                touched = true;
                break;
            }
        if (!touched) continue;
        dep[i] = 1;
        n.value = eval(n);
        if (precision_ == Precision::Fp16Emulated) quantize_in_place(n.value);
    }
}

double Tape::min_kink_distance() const {
    double dist = std::numeric_limits<double>::infinity();
    for (const Node& n : nodes_) {
        switch (n.kind) {
            case OpKind::Relu:
            case OpKind::Abs: {
                for (const double v : value(n.inputs[0]).vec())
                    dist = std::min(dist, std::fabs(v));
                break;
            }
            case OpKind::ScLoss: {
                const Tensor4& cos = value(n.inputs[0]);
                for (std::int64_t i = 0; i < cos.numel(); ++i)
                    if (n.labels->v[static_cast<std::size_t>(i)] == -1)
                        dist = std::min(dist, std::fabs(cos[i] - n.a));
                break;
            }
            case OpKind::CosineMap: {
                for (const double v : n.value.vec())
                    dist = std::min(dist, 1.0 - std::fabs(v));
                break;
            }
            default:
                break;
        }
    }
    return dist;
}

double Tape::finite_diff_check(NodeId loss, double eps) {
    if (!(eps > 0.0)) throw ParamError("finite_diff_check: eps must be > 0");
    const GradReport analytic = backward(loss);
    double max_rel = 0.0;
    for (std::size_t p = 0; p < nodes_.size(); ++p) {
        if (!nodes_[p].is_param) continue;
        const NodeId pid = static_cast<NodeId>(p);
        const Tensor4& ag = analytic.grads.at(nodes_[p].name);
        const std::int64_t count = nodes_[p].value.numel();
        for (std::int64_t i = 0; i < count; ++i) {
            const double orig = nodes_[p].value[i];
            poke_param(pid, i, orig + eps);
            const double fp = value(loss)[0];
            poke_param(pid, i, orig - eps);
            const double fm = value(loss)[0];
            poke_param(pid, i, orig);
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = ag[i];
            const double rel = std::fabs(a - numeric) /
                               std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

}  // namespace scd
