#include "ferrosnn/snn_core.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ferrosnn::snn {

double surrogate_grad(double v, const SurrogateParams& sp, double v_th) {
    return std::fabs(v - v_th) < sp.window ? sp.amplitude : 0.0;
}

LifState lif_step(const LifState& state, double syn_input, const LifParams& p) {
    LifState next;
    next.i = p.beta * state.i + syn_input;
    next.v = p.gamma * state.v * (1.0 - state.s) + next.i;
    next.s = next.v >= p.v_th ? 1.0 : 0.0;
    return next;
}

// --- spec -------------------------------------------------------------------

NetworkSpec NetworkSpec::paper(int timesteps) {
    NetworkSpec s;
    s.timesteps = timesteps;
    return s;
}

NetworkSpec NetworkSpec::scaled(int timesteps, int width_divisor) {
    NetworkSpec s;
    s.conv1_filters = std::max(1, 64 / width_divisor);
    s.conv2_filters = std::max(1, 128 / width_divisor);
    s.conv3_filters = std::max(1, 256 / width_divisor);
    s.hidden = std::max(2, 256 / width_divisor);
    s.timesteps = timesteps;
    return s;
}

NetworkSpec NetworkSpec::mini() {
    NetworkSpec s;
    s.grid_h = 2;
    s.grid_w = 2;
    s.conv1_filters = 1;
    s.conv1_k = 1;
    s.conv2_filters = 2;
    s.conv2_k = 1;
    s.pool = 2;
    s.conv3_filters = 3;
    s.conv3_k = 1;
    s.hidden = 3;
    s.classes = 2;
    s.timesteps = 3;
    return s;
}

void NetworkSpec::validate() const {
    auto positive = [](int v, const char* what) {
        if (v < 1) throw std::invalid_argument(std::string("network spec: ") + what);
    };
    positive(conv1_h(), "conv1 output height < 1");
    positive(conv1_w(), "conv1 output width < 1");
    positive(conv2_h(), "conv2 output height < 1");
    positive(conv2_w(), "conv2 output width < 1");
    positive(pool_h(), "pooled height < 1");
    positive(pool_w(), "pooled width < 1");
    positive(conv3_h(), "conv3 output height < 1");
    positive(conv3_w(), "conv3 output width < 1");
    positive(hidden, "hidden width < 1");
    if (classes < 2) throw std::invalid_argument("network spec: need at least 2 classes");
    if (timesteps < tc_taps)
        throw std::invalid_argument("network spec: need at least tc_taps timesteps");
}

std::vector<NetworkSpec::LayerInfo> NetworkSpec::layers() const {
    auto info = [](std::string name, std::size_t syn, std::size_t neurons, int fan_in) {
        return LayerInfo{std::move(name), syn, neurons, fan_in,
                         fabric::LayerBound::from_fan_in(fan_in).bound};
    };
    const int k1 = conv1_k * conv1_k, k2 = conv2_k * conv2_k, k3 = conv3_k * conv3_k;
    return {
        info("conv1", static_cast<std::size_t>(conv1_filters) * k1,
             static_cast<std::size_t>(n_conv1()), k1),
        info("conv2", static_cast<std::size_t>(conv2_filters) * conv1_filters * k2,
             static_cast<std::size_t>(n_conv2()), conv1_filters * k2),
        info("conv3", static_cast<std::size_t>(conv3_filters) * conv2_filters * k3,
             static_cast<std::size_t>(conv3_flat()), conv2_filters * k3),
        info("tc1", static_cast<std::size_t>(hidden) * conv3_flat() * tc_taps,
             static_cast<std::size_t>(hidden), conv3_flat()),
        info("r1", static_cast<std::size_t>(hidden) * hidden, static_cast<std::size_t>(hidden),
             hidden),
        info("fc1", static_cast<std::size_t>(hidden) * hidden, static_cast<std::size_t>(hidden),
             hidden),
        info("fc2", static_cast<std::size_t>(classes) * hidden,
             static_cast<std::size_t>(classes), hidden),
    };
}

std::size_t NetworkSpec::synaptic_parameter_count() const {
    std::size_t total = 0;
    for (const auto& l : layers()) total += l.synapses;
    return total;
}

std::size_t NetworkSpec::neuron_count() const {
    std::size_t total = 0;
    for (const auto& l : layers()) total += l.neurons;
    return total;
}

// --- parameters ---------------------------------------------------------------

NetworkParams NetworkParams::init(const NetworkSpec& spec, Rng& rng) {
    spec.validate();
    NetworkParams p;
    const auto layer_info = spec.layers();
    auto fill = [&](std::vector<double>& w, const NetworkSpec::LayerInfo& info) {
        w.resize(info.synapses);
        for (auto& v : w) v = rng.uniform(-info.bound, info.bound);
    };
    fill(p.conv1, layer_info[0]);
    fill(p.conv2, layer_info[1]);
    fill(p.conv3, layer_info[2]);
    fill(p.tc1, layer_info[3]);
    fill(p.r1, layer_info[4]);
    fill(p.fc1, layer_info[5]);
    fill(p.fc2, layer_info[6]);
    p.w_ts.assign(spec.timesteps, 1.0 / static_cast<double>(spec.timesteps));
    p.beta.assign(lif_layer_count, spec.decay_init);
    p.gamma.assign(lif_layer_count, spec.decay_init);
    return p;
}

std::vector<TensorRef> tensor_refs(NetworkParams& params, const NetworkSpec& spec) {
    const auto info = spec.layers();
    auto bound_of = [&](const std::string& name) {
        for (const auto& l : info)
            if (l.name == name) return fabric::LayerBound{l.fan_in, l.bound};
        throw std::logic_error("unknown layer " + name);
    };
    return {
        {"conv1", &params.conv1, TensorRef::Kind::synaptic, bound_of("conv1")},
        {"conv2", &params.conv2, TensorRef::Kind::synaptic, bound_of("conv2")},
        {"conv3", &params.conv3, TensorRef::Kind::synaptic, bound_of("conv3")},
        {"tc1", &params.tc1, TensorRef::Kind::synaptic, bound_of("tc1")},
        {"r1", &params.r1, TensorRef::Kind::synaptic, bound_of("r1")},
        {"fc1", &params.fc1, TensorRef::Kind::synaptic, bound_of("fc1")},
        {"fc2", &params.fc2, TensorRef::Kind::synaptic, bound_of("fc2")},
        {"w_ts", &params.w_ts, TensorRef::Kind::temporal, {}},
        {"decay_beta", &params.beta, TensorRef::Kind::decay, {}},
        {"decay_gamma", &params.gamma, TensorRef::Kind::decay, {}},
    };
}

NetworkGrads NetworkGrads::zeros(const NetworkSpec& spec) {
    const auto info = spec.layers();
    NetworkGrads g;
    g.conv1.assign(info[0].synapses, 0.0);
    g.conv2.assign(info[1].synapses, 0.0);
    g.conv3.assign(info[2].synapses, 0.0);
    g.tc1.assign(info[3].synapses, 0.0);
    g.r1.assign(info[4].synapses, 0.0);
    g.fc1.assign(info[5].synapses, 0.0);
    g.fc2.assign(info[6].synapses, 0.0);
    g.w_ts.assign(spec.timesteps, 0.0);
    g.beta.assign(lif_layer_count, 0.0);
    g.gamma.assign(lif_layer_count, 0.0);
    return g;
}

void NetworkGrads::clear() {
    for (auto* v : {&conv1, &conv2, &conv3, &tc1, &r1, &fc1, &fc2, &w_ts, &beta, &gamma})
        std::fill(v->begin(), v->end(), 0.0);
}

void NetworkGrads::add_scaled(const NetworkGrads& other, double scale) {
    auto add = [scale](std::vector<double>& dst, const std::vector<double>& src) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
    };
    add(conv1, other.conv1);
    add(conv2, other.conv2);
    add(conv3, other.conv3);
    add(tc1, other.tc1);
    add(r1, other.r1);
    add(fc1, other.fc1);
    add(fc2, other.fc2);
    add(w_ts, other.w_ts);
    add(beta, other.beta);
    add(gamma, other.gamma);
}

// --- forward -------------------------------------------------------------------

namespace {

// valid convolution, NCHW with channel-major planes
void conv_forward(std::span<const double> in, int in_ch, int ih, int iw,
                  std::span<const double> w, int out_ch, int k, std::span<double> out) {
    const int oh = ih - k + 1, ow = iw - k + 1;
    for (int oc = 0; oc < out_ch; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double sum = 0.0;
                for (int ic = 0; ic < in_ch; ++ic) {
                    const double* wp = &w[((oc * in_ch + ic) * k) * k];
                    const double* ip = &in[(ic * ih + oy) * iw + ox];
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) sum += wp[ky * k + kx] * ip[ky * iw + kx];
                }
                out[(oc * oh + oy) * ow + ox] = sum;
            }
        }
    }
}

void conv_weight_grad(std::span<const double> in, int in_ch, int ih, int iw,
                      std::span<const double> ga, int out_ch, int k, std::span<double> gw) {
    const int oh = ih - k + 1, ow = iw - k + 1;
    for (int oc = 0; oc < out_ch; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const double g = ga[(oc * oh + oy) * ow + ox];
                if (g == 0.0) continue;
                for (int ic = 0; ic < in_ch; ++ic) {
                    double* gwp = &gw[((oc * in_ch + ic) * k) * k];
                    const double* ip = &in[(ic * ih + oy) * iw + ox];
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) gwp[ky * k + kx] += g * ip[ky * iw + kx];
                }
            }
        }
    }
}

void conv_input_grad(std::span<const double> ga, int out_ch, int oh, int ow,
                     std::span<const double> w, int in_ch, int k, int ih, int iw,
                     std::span<double> gin) {
    std::fill(gin.begin(), gin.end(), 0.0);
    for (int oc = 0; oc < out_ch; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const double g = ga[(oc * oh + oy) * ow + ox];
                if (g == 0.0) continue;
                for (int ic = 0; ic < in_ch; ++ic) {
                    const double* wp = &w[((oc * in_ch + ic) * k) * k];
                    double* gp = &gin[(ic * ih + oy) * iw + ox];
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) gp[ky * iw + kx] += g * wp[ky * k + kx];
                }
            }
        }
    }
}

inline double spike_of(double v, double v_th, const SurrogateParams& sp, SpikeMode mode) {
    if (mode == SpikeMode::binary) return v >= v_th ? 1.0 : 0.0;
    // clipped-linear relaxation; its derivative is the rectangular window
    return std::clamp(sp.amplitude * (v - v_th + sp.window), 0.0,
                      2.0 * sp.amplitude * sp.window);
}

// One LIF layer step over n neurons, recording (a, i, v, s) at row t.
void lif_layer_step(int t, int n, std::span<const double> syn_in, double beta, double gamma,
                    double v_th, const SurrogateParams& sp, SpikeMode mode,
                    std::vector<double>& a, std::vector<double>& i, std::vector<double>& v,
                    std::vector<double>& s) {
    const double* i_prev = t > 0 ? &i[(t - 1) * n] : nullptr;
    const double* v_prev = t > 0 ? &v[(t - 1) * n] : nullptr;
    const double* s_prev = t > 0 ? &s[(t - 1) * n] : nullptr;
    for (int j = 0; j < n; ++j) {
        const double ij = beta * (i_prev ? i_prev[j] : 0.0) + syn_in[j];
        const double vj =
            gamma * (v_prev ? v_prev[j] : 0.0) * (1.0 - (s_prev ? s_prev[j] : 0.0)) + ij;
        a[t * n + j] = syn_in[j];
        i[t * n + j] = ij;
        v[t * n + j] = vj;
        s[t * n + j] = spike_of(vj, v_th, sp, mode);
    }
}

}  // namespace

std::vector<double> temporal_aggregate(std::span<const double> logits, int classes,
                                       std::span<const double> w_ts) {
    if (logits.size() != w_ts.size() * static_cast<std::size_t>(classes))
        throw std::invalid_argument("temporal_aggregate: logits/temporal weight length mismatch");
    std::vector<double> y(classes, 0.0);
    for (std::size_t t = 0; t < w_ts.size(); ++t)
        for (int c = 0; c < classes; ++c) y[c] += w_ts[t] * logits[t * classes + c];
    return y;
}

double cross_entropy(std::span<const double> y, int target, std::span<double> gy) {
    const double y_max = *std::max_element(y.begin(), y.end());
    double z = 0.0;
    for (double v : y) z += std::exp(v - y_max);
    const double log_z = std::log(z) + y_max;
    for (std::size_t c = 0; c < y.size(); ++c) {
        const double p = std::exp(y[c] - log_z);
        gy[c] = p - (static_cast<int>(c) == target ? 1.0 : 0.0);
    }
    return log_z - y[target];
}

ForwardResult forward(const NetworkSpec& spec, const NetworkParams& params,
                      std::span<const float> input, SpikeMode mode, ForwardTrace* trace) {
    const int T = spec.timesteps;
    const int gh = spec.grid_h, gw = spec.grid_w;
    if (input.size() != static_cast<std::size_t>(T) * gh * gw)
        throw std::invalid_argument("forward: input is not T x grid_h x grid_w");

    const int n1 = spec.n_conv1(), n2 = spec.n_conv2(), np = spec.n_pool();
    const int n3 = spec.conv3_flat(), nh = spec.hidden, nc = spec.classes;
    const int h1 = spec.conv1_h(), w1 = spec.conv1_w();
    const int h2 = spec.conv2_h(), w2 = spec.conv2_w();
    const int ph = spec.pool_h(), pw = spec.pool_w();
    const int taps = spec.tc_taps;

    ForwardTrace local;
    ForwardTrace& tr = trace ? *trace : local;
    tr.T = T;
    auto sized = [T](std::vector<double>& v, int n) { v.assign(static_cast<std::size_t>(T) * n, 0.0); };
    sized(tr.a1, n1); sized(tr.i1, n1); sized(tr.v1, n1); sized(tr.s1, n1);
    sized(tr.a2, n2); sized(tr.i2, n2); sized(tr.v2, n2); sized(tr.s2, n2);
    sized(tr.pool, np);
    sized(tr.a3, n3); sized(tr.i3, n3); sized(tr.v3, n3); sized(tr.s3, n3);
    sized(tr.a4, nh); sized(tr.i4, nh); sized(tr.v4, nh); sized(tr.s4, nh);
    sized(tr.a5, nh); sized(tr.i5, nh); sized(tr.v5, nh); sized(tr.s5, nh);
    sized(tr.a6, nh); sized(tr.i6, nh); sized(tr.v6, nh); sized(tr.s6, nh);
    sized(tr.a7, nc); sized(tr.i7, nc); sized(tr.v7, nc);

    std::vector<double> frame(static_cast<std::size_t>(gh) * gw);
    std::vector<double> buf1(n1), buf2(n2), buf3(n3), buf4(nh), buf5(nh), buf6(nh), buf7(nc);

    const auto& sp = spec.surrogate;
    const double v_th = spec.v_th;

    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < gh * gw; ++j) frame[j] = input[static_cast<std::size_t>(t) * gh * gw + j];

        conv_forward(frame, 1, gh, gw, params.conv1, spec.conv1_filters, spec.conv1_k, buf1);
        lif_layer_step(t, n1, buf1, params.beta[lif_conv1], params.gamma[lif_conv1], v_th, sp,
                       mode, tr.a1, tr.i1, tr.v1, tr.s1);

        conv_forward(std::span<const double>(&tr.s1[static_cast<std::size_t>(t) * n1], n1),
                     spec.conv1_filters, h1, w1, params.conv2, spec.conv2_filters, spec.conv2_k,
                     buf2);
        lif_layer_step(t, n2, buf2, params.beta[lif_conv2], params.gamma[lif_conv2], v_th, sp,
                       mode, tr.a2, tr.i2, tr.v2, tr.s2);

        // 2x2 average pooling over spikes; trailing rows/cols that do not fill
        // a window are dropped
        {
            const double* s2t = &tr.s2[static_cast<std::size_t>(t) * n2];
            double* pt = &tr.pool[static_cast<std::size_t>(t) * np];
            const double inv = 1.0 / (spec.pool * spec.pool);
            for (int c = 0; c < spec.conv2_filters; ++c)
                for (int py = 0; py < ph; ++py)
                    for (int px = 0; px < pw; ++px) {
                        double sum = 0.0;
                        for (int dy = 0; dy < spec.pool; ++dy)
                            for (int dx = 0; dx < spec.pool; ++dx)
                                sum += s2t[(c * h2 + py * spec.pool + dy) * w2 + px * spec.pool + dx];
                        pt[(c * ph + py) * pw + px] = sum * inv;
                    }
        }

        conv_forward(std::span<const double>(&tr.pool[static_cast<std::size_t>(t) * np], np),
                     spec.conv2_filters, ph, pw, params.conv3, spec.conv3_filters, spec.conv3_k,
                     buf3);
        lif_layer_step(t, n3, buf3, params.beta[lif_conv3], params.gamma[lif_conv3], v_th, sp,
                       mode, tr.a3, tr.i3, tr.v3, tr.s3);

        // temporal convolution over the last `taps` conv3 spike vectors,
        // zero-padded before t=0; tap k reads time t-(taps-1)+k
        for (int u = 0; u < nh; ++u) {
            double sum = 0.0;
            for (int k = 0; k < taps; ++k) {
                const int tau = t - (taps - 1) + k;
                if (tau < 0) continue;
                const double* s3tau = &tr.s3[static_cast<std::size_t>(tau) * n3];
                const double* wrow = &params.tc1[(static_cast<std::size_t>(u) * n3) * taps];
                for (int f = 0; f < n3; ++f) sum += wrow[f * taps + k] * s3tau[f];
            }
            buf4[u] = sum;
        }
        lif_layer_step(t, nh, buf4, params.beta[lif_tc1], params.gamma[lif_tc1], v_th, sp, mode,
                       tr.a4, tr.i4, tr.v4, tr.s4);

        // recurrent layer: identity feedforward from tc1 plus its own
        // recurrent matrix on the previous spike vector
        for (int u = 0; u < nh; ++u) {
            double sum = tr.s4[static_cast<std::size_t>(t) * nh + u];
            if (t > 0) {
                const double* s5p = &tr.s5[static_cast<std::size_t>(t - 1) * nh];
                const double* wrow = &params.r1[static_cast<std::size_t>(u) * nh];
                for (int j = 0; j < nh; ++j) sum += wrow[j] * s5p[j];
            }
            buf5[u] = sum;
        }
        lif_layer_step(t, nh, buf5, params.beta[lif_r1], params.gamma[lif_r1], v_th, sp, mode,
                       tr.a5, tr.i5, tr.v5, tr.s5);

        for (int u = 0; u < nh; ++u) {
            double sum = 0.0;
            const double* wrow = &params.fc1[static_cast<std::size_t>(u) * nh];
            const double* s5t = &tr.s5[static_cast<std::size_t>(t) * nh];
            for (int j = 0; j < nh; ++j) sum += wrow[j] * s5t[j];
            buf6[u] = sum;
        }
        lif_layer_step(t, nh, buf6, params.beta[lif_fc1], params.gamma[lif_fc1], v_th, sp, mode,
                       tr.a6, tr.i6, tr.v6, tr.s6);

        // non-spiking readout: a leaky integrator whose membrane potential is
        // the per-timestep logit vector
        for (int c = 0; c < nc; ++c) {
            double sum = 0.0;
            const double* wrow = &params.fc2[static_cast<std::size_t>(c) * nh];
            const double* s6t = &tr.s6[static_cast<std::size_t>(t) * nh];
            for (int j = 0; j < nh; ++j) sum += wrow[j] * s6t[j];
            buf7[c] = sum;
        }
        for (int c = 0; c < nc; ++c) {
            const double ip = t > 0 ? tr.i7[static_cast<std::size_t>(t - 1) * nc + c] : 0.0;
            const double vp = t > 0 ? tr.v7[static_cast<std::size_t>(t - 1) * nc + c] : 0.0;
            const double ij = params.beta[lif_readout] * ip + buf7[c];
            const double vj = params.gamma[lif_readout] * vp + ij;
            tr.a7[static_cast<std::size_t>(t) * nc + c] = buf7[c];
            tr.i7[static_cast<std::size_t>(t) * nc + c] = ij;
            tr.v7[static_cast<std::size_t>(t) * nc + c] = vj;
        }
    }

    ForwardResult res;
    res.logits = tr.v7;
    res.y = temporal_aggregate(res.logits, nc, params.w_ts);
    res.predicted = 0;
    for (int c = 1; c < nc; ++c)
        if (res.y[c] > res.y[res.predicted]) res.predicted = c;

    const std::vector<double>* spike_arrays[6] = {&tr.s1, &tr.s2, &tr.s3, &tr.s4, &tr.s5, &tr.s6};
    for (int l = 0; l < 6; ++l) {
        double sum = 0.0;
        for (double s : *spike_arrays[l]) sum += s;
        res.spike_rate[l] = spike_arrays[l]->empty() ? 0.0 : sum / spike_arrays[l]->size();
    }
    return res;
}

// --- backward ------------------------------------------------------------------

namespace {

// Backward step of one spiking LIF layer at time t. gs_ext is the total
// downstream gradient into s_t; gv_next/gi_next carry d(loss)/d(v_{t+1}),
// d(loss)/d(i_{t+1}) and are replaced with the step-t values. Returns the
// gradient into the synaptic input a_t in ga, plus decay contributions.
void lif_layer_backward(int t, int n, const std::vector<double>& i, const std::vector<double>& v,
                        const std::vector<double>& s, std::span<const double> gs_ext, double beta,
                        double gamma, double v_th, const SurrogateParams& sp,
                        std::vector<double>& gv_next, std::vector<double>& gi_next,
                        std::span<double> ga, double& g_beta, double& g_gamma) {
    const std::size_t row = static_cast<std::size_t>(t) * n;
    for (int j = 0; j < n; ++j) {
        const double vt = v[row + j];
        const double st = s[row + j];
        // reset-gate path: v_{t+1} = gamma * v_t * (1 - s_t) + i_{t+1}
        const double gs_total = gs_ext[j] - gv_next[j] * gamma * vt;
        const double gv = gs_total * surrogate_grad(vt, sp, v_th) + gv_next[j] * gamma * (1.0 - st);
        const double gi = gv + beta * gi_next[j];
        if (t > 0) {
            const std::size_t prev = static_cast<std::size_t>(t - 1) * n;
            g_beta += gi * i[prev + j];
            g_gamma += gv * v[prev + j] * (1.0 - s[prev + j]);
        }
        ga[j] = gi;
        gv_next[j] = gv;
        gi_next[j] = gi;
    }
}

}  // namespace

double backward(const NetworkSpec& spec, const NetworkParams& params, const ForwardTrace& trace,
                std::span<const float> input, int target, NetworkGrads& grads) {
    const int T = spec.timesteps;
    const int gh = spec.grid_h, gw = spec.grid_w;
    const int n1 = spec.n_conv1(), n2 = spec.n_conv2(), np = spec.n_pool();
    const int n3 = spec.conv3_flat(), nh = spec.hidden, nc = spec.classes;
    const int h1 = spec.conv1_h(), w1 = spec.conv1_w();
    const int h2 = spec.conv2_h(), w2 = spec.conv2_w();
    const int ph = spec.pool_h(), pw = spec.pool_w();
    const int taps = spec.tc_taps;
    const auto& sp = spec.surrogate;
    const double v_th = spec.v_th;

    std::vector<double> y = temporal_aggregate(trace.v7, nc, params.w_ts);
    std::vector<double> gy(nc);
    const double loss = cross_entropy(y, target, gy);

    // temporal weight gradients: dL/dw_ts(t) = gy . o(t)
    for (int t = 0; t < T; ++t) {
        double dot = 0.0;
        for (int c = 0; c < nc; ++c) dot += gy[c] * trace.v7[static_cast<std::size_t>(t) * nc + c];
        grads.w_ts[t] += dot;
    }

    // carries per LIF layer
    std::vector<double> gv1(n1, 0.0), gi1(n1, 0.0), gv2(n2, 0.0), gi2(n2, 0.0);
    std::vector<double> gv3(n3, 0.0), gi3(n3, 0.0), gv4(nh, 0.0), gi4(nh, 0.0);
    std::vector<double> gv5(nh, 0.0), gi5(nh, 0.0), gv6(nh, 0.0), gi6(nh, 0.0);
    std::vector<double> gv7(nc, 0.0), gi7(nc, 0.0);

    std::vector<double> gs3_all(static_cast<std::size_t>(T) * n3, 0.0);  // tc1 tap fan-out
    std::vector<double> gs5_from_next(nh, 0.0);                          // r1 recurrence

    std::vector<double> ga7(nc), ga6(nh), ga5(nh), ga4(nh), ga3(n3), ga2(n2), ga1(n1);
    std::vector<double> gs6(nh), gs5(nh), gs2(n2), gs1(n1), gpool(np);
    std::vector<double> frame(static_cast<std::size_t>(gh) * gw);

    for (int t = T - 1; t >= 0; --t) {
        const std::size_t t5 = static_cast<std::size_t>(t) * nh;
        const std::size_t t6 = static_cast<std::size_t>(t) * nh;

        // readout: gv = w_ts[t]*gy + gamma*gv_next (no spike, no reset)
        for (int c = 0; c < nc; ++c) {
            const double gv = params.w_ts[t] * gy[c] + params.gamma[lif_readout] * gv7[c];
            const double gi = gv + params.beta[lif_readout] * gi7[c];
            if (t > 0) {
                grads.beta[lif_readout] += gi * trace.i7[static_cast<std::size_t>(t - 1) * nc + c];
                grads.gamma[lif_readout] += gv * trace.v7[static_cast<std::size_t>(t - 1) * nc + c];
            }
            ga7[c] = gi;
            gv7[c] = gv;
            gi7[c] = gi;
        }
        std::fill(gs6.begin(), gs6.end(), 0.0);
        for (int c = 0; c < nc; ++c) {
            const double g = ga7[c];
            const double* wrow = &params.fc2[static_cast<std::size_t>(c) * nh];
            double* gwrow = &grads.fc2[static_cast<std::size_t>(c) * nh];
            const double* s6t = &trace.s6[t6];
            for (int j = 0; j < nh; ++j) {
                gwrow[j] += g * s6t[j];
                gs6[j] += g * wrow[j];
            }
        }

        // fc1
        lif_layer_backward(t, nh, trace.i6, trace.v6, trace.s6, gs6, params.beta[lif_fc1],
                           params.gamma[lif_fc1], v_th, sp, gv6, gi6, ga6,
                           grads.beta[lif_fc1], grads.gamma[lif_fc1]);
        std::copy(gs5_from_next.begin(), gs5_from_next.end(), gs5.begin());
        for (int u = 0; u < nh; ++u) {
            const double g = ga6[u];
            if (g == 0.0) continue;
            const double* wrow = &params.fc1[static_cast<std::size_t>(u) * nh];
            double* gwrow = &grads.fc1[static_cast<std::size_t>(u) * nh];
            const double* s5t = &trace.s5[t5];
            for (int j = 0; j < nh; ++j) {
                gwrow[j] += g * s5t[j];
                gs5[j] += g * wrow[j];
            }
        }

        // r1 (recurrent)
        lif_layer_backward(t, nh, trace.i5, trace.v5, trace.s5, gs5, params.beta[lif_r1],
                           params.gamma[lif_r1], v_th, sp, gv5, gi5, ga5, grads.beta[lif_r1],
                           grads.gamma[lif_r1]);
        std::fill(gs5_from_next.begin(), gs5_from_next.end(), 0.0);
        if (t > 0) {
            const double* s5p = &trace.s5[static_cast<std::size_t>(t - 1) * nh];
            for (int u = 0; u < nh; ++u) {
                const double g = ga5[u];
                if (g == 0.0) continue;
                const double* wrow = &params.r1[static_cast<std::size_t>(u) * nh];
                double* gwrow = &grads.r1[static_cast<std::size_t>(u) * nh];
                for (int j = 0; j < nh; ++j) {
                    gwrow[j] += g * s5p[j];
                    gs5_from_next[j] += g * wrow[j];
                }
            }
        }

        // tc1; feedforward into r1 is the identity, so gs4 = ga5
        lif_layer_backward(t, nh, trace.i4, trace.v4, trace.s4, ga5, params.beta[lif_tc1],
                           params.gamma[lif_tc1], v_th, sp, gv4, gi4, ga4, grads.beta[lif_tc1],
                           grads.gamma[lif_tc1]);
        for (int k = 0; k < taps; ++k) {
            const int tau = t - (taps - 1) + k;
            if (tau < 0) continue;
            const double* s3tau = &trace.s3[static_cast<std::size_t>(tau) * n3];
            double* gs3tau = &gs3_all[static_cast<std::size_t>(tau) * n3];
            for (int u = 0; u < nh; ++u) {
                const double g = ga4[u];
                if (g == 0.0) continue;
                const double* wrow = &params.tc1[(static_cast<std::size_t>(u) * n3) * taps];
                double* gwrow = &grads.tc1[(static_cast<std::size_t>(u) * n3) * taps];
                for (int f = 0; f < n3; ++f) {
                    gwrow[f * taps + k] += g * s3tau[f];
                    gs3tau[f] += g * wrow[f * taps + k];
                }
            }
        }

        // conv3 (consumes the fully accumulated tap gradient for time t)
        lif_layer_backward(t, n3, trace.i3, trace.v3, trace.s3,
                           std::span<const double>(&gs3_all[static_cast<std::size_t>(t) * n3], n3),
                           params.beta[lif_conv3], params.gamma[lif_conv3], v_th, sp, gv3, gi3,
                           ga3, grads.beta[lif_conv3], grads.gamma[lif_conv3]);
        conv_weight_grad(std::span<const double>(&trace.pool[static_cast<std::size_t>(t) * np], np),
                         spec.conv2_filters, ph, pw, ga3, spec.conv3_filters, spec.conv3_k,
                         grads.conv3);
        conv_input_grad(ga3, spec.conv3_filters, spec.conv3_h(), spec.conv3_w(), params.conv3,
                        spec.conv2_filters, spec.conv3_k, ph, pw, gpool);

        // average pool backward: spread evenly over each window
        {
            std::fill(gs2.begin(), gs2.end(), 0.0);
            const double inv = 1.0 / (spec.pool * spec.pool);
            for (int c = 0; c < spec.conv2_filters; ++c)
                for (int py = 0; py < ph; ++py)
                    for (int px = 0; px < pw; ++px) {
                        const double g = gpool[(c * ph + py) * pw + px] * inv;
                        if (g == 0.0) continue;
                        for (int dy = 0; dy < spec.pool; ++dy)
                            for (int dx = 0; dx < spec.pool; ++dx)
                                gs2[(c * h2 + py * spec.pool + dy) * w2 + px * spec.pool + dx] += g;
                    }
        }

        // conv2
        lif_layer_backward(t, n2, trace.i2, trace.v2, trace.s2, gs2, params.beta[lif_conv2],
                           params.gamma[lif_conv2], v_th, sp, gv2, gi2, ga2,
                           grads.beta[lif_conv2], grads.gamma[lif_conv2]);
        conv_weight_grad(std::span<const double>(&trace.s1[static_cast<std::size_t>(t) * n1], n1),
                         spec.conv1_filters, h1, w1, ga2, spec.conv2_filters, spec.conv2_k,
                         grads.conv2);
        conv_input_grad(ga2, spec.conv2_filters, h2, w2, params.conv2, spec.conv1_filters,
                        spec.conv2_k, h1, w1, gs1);

        // conv1
        lif_layer_backward(t, n1, trace.i1, trace.v1, trace.s1, gs1, params.beta[lif_conv1],
                           params.gamma[lif_conv1], v_th, sp, gv1, gi1, ga1,
                           grads.beta[lif_conv1], grads.gamma[lif_conv1]);
        for (int j = 0; j < gh * gw; ++j)
            frame[j] = input[static_cast<std::size_t>(t) * gh * gw + j];
        conv_weight_grad(frame, 1, gh, gw, ga1, spec.conv1_filters, spec.conv1_k, grads.conv1);
    }
    return loss;
}

double loss_and_gradients(const NetworkSpec& spec, const NetworkParams& params,
                          std::span<const float> input, int target, SpikeMode mode,
                          NetworkGrads& grads) {
    ForwardTrace trace;
    forward(spec, params, input, mode, &trace);
    return backward(spec, params, trace, input, target, grads);
}

}  // namespace ferrosnn::snn
