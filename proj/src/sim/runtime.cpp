#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "resflow/dataflow_sim.hpp"
#include "resflow/dsp_pack.hpp"
#include "resflow/quant.hpp"
#include "sim/internal.hpp"

namespace resflow::sim {

namespace {

// Registered FIFO. Pops see only tokens present at the start of the cycle
// and pushes only the space free at the start of the cycle, so the order in
// which tasks are evaluated within a cycle does not matter.
struct Fifo {
  int64_t cap = 0;
  int tc = 1;
  std::vector<int32_t> buf;
  int64_t head = 0, count = 0;
  int64_t stamp = -1, start = 0, pushed = 0, popped = 0;
  int64_t total_push = 0, total_pop = 0, hw = 0;

  void sync(int64_t cyc) {
    if (stamp != cyc) {
      stamp = cyc;
      start = count;
      pushed = popped = 0;
    }
  }
  bool can_pop(int64_t cyc) {
    sync(cyc);
    return popped < start;
  }
  bool can_push(int64_t cyc, int64_t n = 1) {
    sync(cyc);
    return start + pushed + n <= cap;
  }
  void pop(int32_t* out) {
    std::copy_n(&buf[size_t(head) * tc], tc, out);
    head = (head + 1) % cap;
    --count;
    ++popped;
    ++total_pop;
  }
  int32_t pop1() {
    int32_t v;
    pop(&v);
    return v;
  }
  int32_t* push() {
    const int64_t slot = (head + count) % cap;
    ++count;
    ++pushed;
    ++total_push;
    hw = std::max(hw, count);
    return &buf[size_t(slot) * tc];
  }
  void push1(int32_t v) { *push() = v; }
};

enum class Status { fired, blocked_in, blocked_out, idle, busy };

struct Ctx {
  int64_t cyc = 0;
  std::vector<Fifo> ch;
  int frames = 0;
  int64_t acc_max = 0;
  int64_t acc_over = 0;
  std::vector<int64_t> first_input;
  std::vector<int64_t> frame_done;
  std::vector<ref::Tensor> outputs;

  bool pop_ok(int c) { return ch[c].can_pop(cyc); }
  bool push_ok(int c, int64_t n = 1) { return ch[c].can_push(cyc, n); }
  void watch(int64_t acc) {
    const int64_t a = acc < 0 ? -acc : acc;
    acc_max = std::max(acc_max, a);
    if (acc > std::numeric_limits<int32_t>::max() || acc < std::numeric_limits<int32_t>::min()) ++acc_over;
  }
};

struct Proc {
  int blocked_on = -1;  // channel that stopped the last attempt
  virtual ~Proc() = default;
  virtual Status step(Ctx& x) = 0;
  virtual bool done() const = 0;

  Status in_wait(int c) {
    blocked_on = c;
    return Status::blocked_in;
  }
  Status out_wait(int c) {
    blocked_on = c;
    return Status::blocked_out;
  }
};

// Walks positions of a (H, W, C) stream split across lanes by column.
struct StreamReader {
  std::vector<int> src;
  int token = 1, chans = 1, w = 1, h = 1;
  int pix = 0, tok = 0;

  int tokens_per_pos() const { return chans / token; }
  int x() const { return pix % w; }
  int lane_chan() const { return src[size_t(x()) % src.size()]; }
  bool last_in_frame() const { return pix == w * h - 1 && tok == tokens_per_pos() - 1; }
  // Returns true when a frame completed.
  bool advance() {
    if (++tok < tokens_per_pos()) return false;
    tok = 0;
    if (++pix < w * h) return false;
    pix = 0;
    return true;
  }
};

StreamReader reader_of(const TaskDesc& t) {
  StreamReader r;
  r.src = t.src;
  r.token = t.src_token;
  r.chans = t.src_channels;
  r.w = t.src_w;
  r.h = t.src_h;
  if (r.src.empty() || r.token <= 0 || r.chans % r.token != 0) {
    throw PlanningError("task '" + t.name + "' has an inconsistent source stream");
  }
  return r;
}

class DmaIn : public Proc {
 public:
  DmaIn(const TaskDesc& t, const std::vector<ref::Tensor>& frames) : t_(t), frames_(frames) {}
  bool done() const override { return f_ >= int(frames_.size()); }
  Status step(Ctx& x) override {
    if (done()) return Status::idle;
    for (const auto& d : t_.dests) {
      if (!x.push_ok(d[0])) return out_wait(d[0]);
    }
    const auto& fr = frames_[f_];
    if (pix_ == 0) x.first_input[f_] = x.cyc;
    const int w = fr.w();
    const int y = pix_ / w, xx = pix_ % w;
    for (const auto& d : t_.dests) {
      int32_t* p = x.ch[d[0]].push();
      for (int c = 0; c < fr.ch(); ++c) p[c] = fr.at(c, y, xx);
    }
    if (++pix_ == fr.h() * fr.w()) {
      pix_ = 0;
      ++f_;
    }
    return Status::fired;
  }

 private:
  const TaskDesc& t_;
  const std::vector<ref::Tensor>& frames_;
  int f_ = 0;
  int pix_ = 0;
};

class Demux : public Proc {
 public:
  explicit Demux(const TaskDesc& t) : t_(t), r_(reader_of(t)), tmp_(t.src_token) {}
  bool done() const override { return f_ >= frames_; }
  void set_frames(int n) { frames_ = n; }
  Status step(Ctx& x) override {
    if (done()) return Status::idle;
    const int in = r_.src[0];
    if (!x.pop_ok(in)) return in_wait(in);
    const int lane = r_.x() % t_.lanes;
    for (const auto& d : t_.dests) {
      if (!x.push_ok(d[lane])) return out_wait(d[lane]);
    }
    x.ch[in].pop(tmp_.data());
    for (const auto& d : t_.dests) std::copy(tmp_.begin(), tmp_.end(), x.ch[d[lane]].push());
    if (r_.advance()) ++f_;
    return Status::fired;
  }

 private:
  const TaskDesc& t_;
  StreamReader r_;
  std::vector<int32_t> tmp_;
  int f_ = 0;
  int frames_ = 0;
};

// One position of the window shift register. Codes arrive in stream order
// of the tap's lane; the tap copies the code to its element channel when
// the pixel is the one this tap sees for some output, then passes it on.
class WindowTap : public Proc {
 public:
  WindowTap(const TaskDesc& t, const LayerGeom& g, int frames, int forward_token)
      : t_(t), g_(g), frames_(frames), fwd_token_(forward_token) {
    lane_w_ = g.iw / t.lanes;
    positions_ = int64_t{g.ih} * lane_w_;
    if (t.head) {
      r_ = reader_of(t);
      buf_.resize(size_t(r_.token));
      bufpos_ = r_.token;
    }
  }
  bool done() const override { return f_ >= frames_; }

  Status step(Ctx& x) override {
    if (done()) return Status::idle;
    const int iy = int(p_ / lane_w_);
    const int ix = int(p_ % lane_w_) * t_.lanes + t_.lane;

    int in = -1;
    if (t_.head) {
      if (bufpos_ == r_.token) in = r_.src[size_t(ix) % r_.src.size()];
    } else {
      in = t_.in_slice;
    }
    if (in >= 0 && !x.pop_ok(in)) return in_wait(in);

    const bool emit = sees(iy, ix);
    if (emit && !x.push_ok(t_.element)) return out_wait(t_.element);
    if (t_.out_slice >= 0 && !x.push_ok(t_.out_slice)) return out_wait(t_.out_slice);
    const bool fwd_flush = t_.forward >= 0 && int(fwd_.size()) + 1 == fwd_token_;
    if (fwd_flush && !x.push_ok(t_.forward)) return out_wait(t_.forward);

    int32_t code;
    if (t_.head) {
      if (bufpos_ == r_.token) {
        x.ch[in].pop(buf_.data());
        bufpos_ = 0;
      }
      code = buf_[size_t(bufpos_++)];
    } else {
      code = x.ch[in].pop1();
    }
    if (emit) x.ch[t_.element].push1(code);
    if (t_.out_slice >= 0) x.ch[t_.out_slice].push1(code);
    if (t_.forward >= 0) {
      fwd_.push_back(code);
      if (fwd_flush) {
        std::copy(fwd_.begin(), fwd_.end(), x.ch[t_.forward].push());
        fwd_.clear();
      }
    }
    if (++c_ == g_.ich) {
      c_ = 0;
      if (++p_ == positions_) {
        p_ = 0;
        ++f_;
      }
    }
    return Status::fired;
  }

 private:
  bool sees(int iy, int ix) const {
    const int a = iy + g_.pad - t_.ky;
    if (a < 0 || a % g_.stride != 0 || a / g_.stride >= g_.oh) return false;
    const int span = g_.stride * t_.lanes;
    const int b = ix + g_.pad - t_.q;
    return b >= 0 && b % span == 0 && b / span < g_.ow / t_.lanes;
  }

  const TaskDesc& t_;
  LayerGeom g_;
  int frames_;
  int fwd_token_;
  int lane_w_ = 1;
  int64_t positions_ = 1;
  StreamReader r_;
  std::vector<int32_t> buf_;
  int bufpos_ = 0;
  std::vector<int32_t> fwd_;
  int f_ = 0;
  int64_t p_ = 0;
  int c_ = 0;
};

// Iterates output pairs (oy, m) and input channels of a windowed layer.
struct PairCursor {
  int pairs_w = 1;
  int64_t pairs = 1;
  int ich = 1;
  int f = 0;
  int64_t pair = 0;
  int c = 0;
  int oy() const { return int(pair / pairs_w); }
  int m() const { return int(pair % pairs_w); }
  bool advance() {
    if (++c < ich) return false;
    c = 0;
    if (++pair < pairs) return false;
    pair = 0;
    ++f;
    return true;
  }
};

PairCursor cursor_for(const LayerGeom& g, int lanes) {
  PairCursor pc;
  pc.pairs_w = g.ow / lanes;
  pc.pairs = int64_t{g.oh} * pc.pairs_w;
  pc.ich = g.ich;
  return pc;
}

bool tap_in_bounds(const LayerGeom& g, int lanes, const Tap& t, int oy, int m) {
  const int iy = oy * g.stride + t.ky - g.pad;
  const int ix = m * lanes * g.stride + t.q - g.pad;
  return iy >= 0 && iy < g.ih && ix >= 0 && ix < g.iw;
}

class Padding : public Proc {
 public:
  Padding(const TaskDesc& t, const LayerGeom& g, std::vector<Tap> taps, int frames)
      : t_(t), g_(g), taps_(std::move(taps)), frames_(frames), pc_(cursor_for(g, t.lanes)) {}
  bool done() const override { return pc_.f >= frames_; }
  Status step(Ctx& x) override {
    if (done()) return Status::idle;
    const int oy = pc_.oy(), m = pc_.m();
    for (size_t i = 0; i < taps_.size(); ++i) {
      if (tap_in_bounds(g_, t_.lanes, taps_[i], oy, m) && !x.pop_ok(t_.elements[i])) return in_wait(t_.elements[i]);
    }
    if (!x.push_ok(t_.window)) return out_wait(t_.window);
    int32_t* w = x.ch[t_.window].push();
    for (size_t i = 0; i < taps_.size(); ++i) {
      w[i] = tap_in_bounds(g_, t_.lanes, taps_[i], oy, m) ? x.ch[t_.elements[i]].pop1() : 0;
    }
    pc_.advance();
    return Status::fired;
  }

 private:
  const TaskDesc& t_;
  LayerGeom g_;
  std::vector<Tap> taps_;
  int frames_;
  PairCursor pc_;
};

class Parameter : public Proc {
 public:
  Parameter(const TaskDesc& t, int64_t per_frame, int64_t period, int frames, int warmup)
      : t_(t), total_(per_frame * frames), period_(period), warmup_(warmup) {}
  bool done() const override { return n_ >= total_; }
  Status step(Ctx& x) override {
    if (done() || x.cyc < warmup_) return Status::idle;
    if (!x.push_ok(t_.param)) return out_wait(t_.param);
    x.ch[t_.param].push1(int32_t(n_ % period_));
    ++n_;
    return Status::fired;
  }

 private:
  const TaskDesc& t_;
  int64_t total_;
  int64_t period_;
  int64_t warmup_;
  int64_t n_ = 0;
};

struct DsPart {
  const LayerNode* node = nullptr;
  const LayerParams* params = nullptr;
  int och_par = 1;
  int groups = 0;
};

class Compute : public Proc {
 public:
  Compute(const TaskDesc& t, const Network& net, int frames, int drain)
      : t_(t), n_(net.graph.node(t.node)), g_(n_.geom), frames_(frames), drain_cycles_(drain) {
    lanes_ = t.lanes;
    taps_ = net.taps.at(t.node);
    width_ = g_.fw + (lanes_ - 1) * g_.stride;
    pc_ = cursor_for(g_, lanes_);
    pool_ = is_pool(n_.kind);
    win_.assign(taps_.size(), 0);
    if (pool_) {
      och_par_ = g_.och;
      groups_ = 1;
      pool_out_.assign(size_t(g_.och), 0);
      int sh = 0;
      while ((int64_t{1} << sh) < int64_t{g_.fh} * g_.fw) ++sh;
      pool_shift_ = n_.kind == LayerKind::avgpool ? sh : 0;
    } else {
      params_ = &net.graph.params(t.node);
      const auto& la = net.plan.layer(t.node);
      och_par_ = la.och_par;
      groups_ = la.och_groups();
      acc_frac_ = n_.x_spec.frac + n_.w_spec.frac;
      if (!n_.merged_downsample.empty()) {
        ds_.node = &net.graph.node(n_.merged_downsample);
        ds_.params = &net.graph.params(n_.merged_downsample);
        const auto& ld = net.plan.layer(n_.merged_downsample);
        ds_.och_par = ld.och_par;
        ds_.groups = ld.och_groups();
        if (ld.ow_par != lanes_) throw PlanningError("merged downsample '" + ds_.node->id + "' lane mismatch");
        if (t.skip_out.empty()) throw PlanningError("'" + t.node + "' computes a downsample with nowhere to send it");
        skip_out_token_ = net.channels[t.skip_out[0]].token_codes;
        stage_.assign(size_t(lanes_), {});
        acc_ds_.assign(size_t(lanes_) * ds_.node->geom.och, 0);
      }
      if (!t.skip_in.empty()) {
        skip_frac_ = net.graph.node(n_.skip_pred).y_spec.frac;
        skip_tok_.assign(size_t(lanes_) * och_par_, 0);
      }
      acc_.assign(size_t(lanes_) * g_.och, 0);
      const int k = g_.fh * g_.fw;
      a_row_.resize(size_t(k));
      d_row_.resize(size_t(k));
    }
    groups_all_ = std::max(groups_, ds_.groups);
    out_pos_.resize(size_t(g_.och));
  }

  bool done() const override { return pc_.f >= frames_; }

  Status step(Ctx& x) override {
    if (drain_ > 0) {
      --drain_;
      return Status::busy;
    }
    if (done()) return Status::idle;
    const int c = pc_.c;
    const bool last_c = c == g_.ich - 1;
    const bool main = grp_ < groups_;
    const bool ds = grp_ < ds_.groups;

    if (grp_ == 0) {
      if (t_.window >= 0) {
        if (!x.pop_ok(t_.window)) return in_wait(t_.window);
      } else {
        for (int e : t_.elements) {
          if (!x.pop_ok(e)) return in_wait(e);
        }
      }
    }
    if (main && t_.param >= 0 && !x.pop_ok(t_.param)) return in_wait(t_.param);
    if (ds && !x.pop_ok(t_.param_ds)) return in_wait(t_.param_ds);
    if (main && c == 0) {
      for (int s : t_.skip_in) {
        if (!x.pop_ok(s)) return in_wait(s);
      }
    }
    // A finished position leaves as och_groups tokens written together.
    if (last_c && (pool_ || grp_ == groups_ - 1)) {
      const int64_t n = pool_ ? 1 : groups_;
      for (const auto& o : t_.outputs) {
        for (int ch : o) {
          if (!x.push_ok(ch, n)) return out_wait(ch);
        }
      }
    }
    if (last_c && ds) {
      for (int l = 0; l < lanes_; ++l) {
        const int64_t n = (int64_t(stage_[l].size()) + ds_.och_par) / skip_out_token_;
        if (n > 0 && !x.push_ok(t_.skip_out[l], n)) return out_wait(t_.skip_out[l]);
      }
    }

    if (grp_ == 0) {
      if (t_.window >= 0) {
        x.ch[t_.window].pop(win_.data());
      } else {
        for (size_t i = 0; i < t_.elements.size(); ++i) win_[i] = x.ch[t_.elements[i]].pop1();
      }
    }
    if (main && t_.param >= 0) x.ch[t_.param].pop1();
    if (ds) x.ch[t_.param_ds].pop1();

    if (pool_) {
      pool_channel(x);
    } else {
      if (main) conv_group(x, c, last_c);
      if (ds) ds_group(x, c, last_c);
    }

    if (++grp_ >= groups_all_) {
      grp_ = 0;
      if (pc_.advance()) drain_ = drain_cycles_;
    }
    return Status::fired;
  }

 private:
  int32_t window_at(int ky, int q) const { return win_[size_t(ky) * width_ + q]; }

  void conv_group(Ctx& x, int c, bool last_c) {
    const int k = g_.fh * g_.fw;
    const int o0 = grp_ * och_par_;
    if (c == 0) {
      for (int l = 0; l < int(t_.skip_in.size()); ++l) x.ch[t_.skip_in[l]].pop(&skip_tok_[size_t(l) * och_par_]);
      for (int l = 0; l < lanes_; ++l) {
        for (int i = 0; i < och_par_; ++i) {
          int64_t a = params_->bias[o0 + i];
          if (!t_.skip_in.empty()) a += ref::align_up(skip_tok_[size_t(l) * och_par_ + i], skip_frac_, acc_frac_);
          acc_[size_t(l) * g_.och + o0 + i] = a;
        }
      }
    }
    for (int ky = 0; ky < g_.fh; ++ky) {
      for (int kx = 0; kx < g_.fw; ++kx) {
        a_row_[size_t(ky) * g_.fw + kx] = window_at(ky, kx);
        if (lanes_ == 2) d_row_[size_t(ky) * g_.fw + kx] = window_at(ky, kx + g_.stride);
      }
    }
    for (int i = 0; i < och_par_; ++i) {
      const int o = o0 + i;
      const int32_t* w = &params_->weights[(size_t(o) * g_.ich + c) * k];
      if (lanes_ == 2) {
        const auto r = dsp::packed_dot(std::span<const int32_t>(a_row_), std::span<const int32_t>(d_row_),
                                       std::span<const int32_t>(w, size_t(k)), 0);
        x.watch(acc_[o] += r.a);
        x.watch(acc_[size_t(g_.och) + o] += r.d);
      } else {
        int64_t s = 0;
        for (int j = 0; j < k; ++j) s += int64_t{w[j]} * a_row_[j];
        x.watch(acc_[o] += s);
      }
    }
    if (!last_c || grp_ != groups_ - 1) return;
    for (int l = 0; l < lanes_; ++l) {
      for (int o = 0; o < g_.och; ++o) {
        out_pos_[o] = int32_t(quant::requantize(acc_[size_t(l) * g_.och + o], acc_frac_, n_.y_spec, n_.relu));
      }
      for (const auto& out : t_.outputs) {
        for (int gi = 0; gi < groups_; ++gi) {
          std::copy_n(out_pos_.begin() + size_t(gi) * och_par_, och_par_, x.ch[out[l]].push());
        }
      }
    }
  }

  void ds_group(Ctx& x, int c, bool last_c) {
    const auto& dn = *ds_.node;
    const int och = dn.geom.och;
    const int o0 = grp_ * ds_.och_par;
    const int frac = dn.x_spec.frac + dn.w_spec.frac;
    const int32_t a = window_at(g_pad(), g_pad());
    const int32_t d = lanes_ == 2 ? window_at(g_pad(), g_pad() + g_.stride) : 0;
    for (int i = 0; i < ds_.och_par; ++i) {
      const int o = o0 + i;
      if (c == 0) {
        for (int l = 0; l < lanes_; ++l) acc_ds_[size_t(l) * och + o] = ds_.params->bias[o];
      }
      const int32_t w = ds_.params->weights[size_t(o) * dn.geom.ich + c];
      if (lanes_ == 2) {
        const auto r = dsp::packed_dot(std::span<const int32_t>(&a, 1), std::span<const int32_t>(&d, 1),
                                       std::span<const int32_t>(&w, 1), 0);
        x.watch(acc_ds_[o] += r.a);
        x.watch(acc_ds_[size_t(och) + o] += r.d);
      } else {
        x.watch(acc_ds_[o] += int64_t{w} * a);
      }
    }
    if (!last_c) return;
    for (int l = 0; l < lanes_; ++l) {
      auto& st = stage_[l];
      for (int i = 0; i < ds_.och_par; ++i) {
        st.push_back(int32_t(quant::requantize(acc_ds_[size_t(l) * och + o0 + i], frac, dn.y_spec, dn.relu)));
      }
      size_t used = 0;
      while (st.size() - used >= size_t(skip_out_token_)) {
        std::copy_n(st.begin() + used, skip_out_token_, x.ch[t_.skip_out[l]].push());
        used += skip_out_token_;
      }
      st.erase(st.begin(), st.begin() + used);
    }
  }

  int g_pad() const { return g_.pad; }

  void pool_channel(Ctx& x) {
    const int c = pc_.c;
    const int oy = pc_.oy(), m = pc_.m();
    const bool avg = n_.kind == LayerKind::avgpool;
    int64_t acc = avg ? 0 : std::numeric_limits<int64_t>::min();
    for (size_t i = 0; i < taps_.size(); ++i) {
      if (!tap_in_bounds(g_, 1, taps_[i], oy, m)) continue;
      acc = avg ? acc + win_[i] : std::max<int64_t>(acc, win_[i]);
    }
    if (!avg && acc == std::numeric_limits<int64_t>::min()) acc = 0;
    pool_out_[c] = int32_t(quant::requantize(acc, n_.x_spec.frac + pool_shift_, n_.y_spec, n_.relu));
    if (c == g_.ich - 1) {
      for (const auto& o : t_.outputs) std::copy(pool_out_.begin(), pool_out_.end(), x.ch[o[0]].push());
    }
  }

  const TaskDesc& t_;
  const LayerNode& n_;
  const LayerGeom& g_;
  int frames_;
  int drain_cycles_;
  int drain_ = 0;
  int lanes_ = 1;
  std::vector<Tap> taps_;
  int width_ = 1;
  PairCursor pc_;
  bool pool_ = false;
  int pool_shift_ = 0;
  std::vector<int32_t> pool_out_;
  const LayerParams* params_ = nullptr;
  int och_par_ = 1;
  int groups_ = 1;
  int groups_all_ = 1;
  int acc_frac_ = 0;
  int skip_frac_ = 0;
  DsPart ds_;
  int skip_out_token_ = 1;
  std::vector<std::vector<int32_t>> stage_;
  std::vector<int64_t> acc_;
  std::vector<int64_t> acc_ds_;
  std::vector<int32_t> skip_tok_;
  std::vector<int32_t> win_;
  std::vector<int32_t> a_row_, d_row_;
  std::vector<int32_t> out_pos_;
  int grp_ = 0;
};

class GlobalPool : public Proc {
 public:
  GlobalPool(const TaskDesc& t, const LayerNode& n, int frames)
      : t_(t), n_(n), r_(reader_of(t)), frames_(frames), tmp_(t.src_token) {
    reset();
    int sh = 0;
    while ((int64_t{1} << sh) < int64_t{n.geom.fh} * n.geom.fw) ++sh;
    shift_ = n.kind == LayerKind::avgpool ? sh : 0;
  }
  bool done() const override { return f_ >= frames_; }
  Status step(Ctx& x) override {
    if (done()) return Status::idle;
    const int in = r_.lane_chan();
    if (!x.pop_ok(in)) return in_wait(in);
    const bool last = r_.last_in_frame();
    if (last) {
      for (const auto& o : t_.outputs) {
        if (!x.push_ok(o[0])) return out_wait(o[0]);
      }
    }
    x.ch[in].pop(tmp_.data());
    const bool avg = n_.kind == LayerKind::avgpool;
    for (int i = 0; i < r_.token; ++i) {
      auto& a = acc_[size_t(r_.tok) * r_.token + i];
      a = avg ? a + tmp_[i] : std::max<int64_t>(a, tmp_[i]);
    }
    if (last) {
      for (const auto& o : t_.outputs) {
        int32_t* p = x.ch[o[0]].push();
        for (int c = 0; c < n_.geom.och; ++c) {
          p[c] = int32_t(quant::requantize(acc_[c], n_.x_spec.frac + shift_, n_.y_spec, n_.relu));
        }
      }
      reset();
    }
    if (r_.advance()) ++f_;
    return Status::fired;
  }

 private:
  void reset() {
    const bool avg = n_.kind == LayerKind::avgpool;
    acc_.assign(size_t(n_.geom.och), avg ? 0 : std::numeric_limits<int64_t>::min());
  }

  const TaskDesc& t_;
  const LayerNode& n_;
  StreamReader r_;
  int frames_;
  std::vector<int32_t> tmp_;
  std::vector<int64_t> acc_;
  int shift_ = 0;
  int f_ = 0;
};

class DmaOut : public Proc {
 public:
  DmaOut(const TaskDesc& t, const LayerNode& n, int frames)
      : t_(t), n_(n), r_(reader_of(t)), frames_(frames), tmp_(t.src_token) {
    cur_ = ref::make_tensor(n.geom.och, n.geom.oh, n.geom.ow, n.y_spec);
  }
  bool done() const override { return f_ >= frames_; }
  Status step(Ctx& x) override {
    if (done()) return Status::idle;
    const int in = r_.lane_chan();
    if (!x.pop_ok(in)) return in_wait(in);
    x.ch[in].pop(tmp_.data());
    const int y = r_.pix / r_.w, xx = r_.pix % r_.w;
    for (int i = 0; i < r_.token; ++i) cur_.codes[cur_.index(r_.tok * r_.token + i, y, xx)] = tmp_[i];
    if (r_.advance()) {
      x.frame_done[f_] = x.cyc;
      x.outputs.push_back(cur_);
      ++f_;
    }
    return Status::fired;
  }

 private:
  const TaskDesc& t_;
  const LayerNode& n_;
  StreamReader r_;
  int frames_;
  std::vector<int32_t> tmp_;
  ref::Tensor cur_;
  int f_ = 0;
};

char status_code(Status s) {
  switch (s) {
    case Status::fired: return 'f';
    case Status::blocked_in: return 'i';
    case Status::blocked_out: return 'o';
    case Status::idle: return '-';
    case Status::busy: return 'd';
  }
  return '?';
}

std::string describe_deadlock(const Network& net, const std::vector<std::unique_ptr<Proc>>& procs,
                              const std::vector<Status>& last, const Ctx& x) {
  std::ostringstream os;
  os << "no task fired for " << "the deadlock window ending at cycle " << x.cyc << "; blocked:";
  int shown = 0, blocked = 0;
  // Taps are numerous and rarely the cause, list them last.
  std::vector<size_t> order;
  for (int pass = 0; pass < 2; ++pass) {
    for (size_t i = 0; i < procs.size(); ++i) {
      if ((net.tasks[i].kind == TaskKind::window_slice) == (pass == 1)) order.push_back(i);
    }
  }
  for (size_t i : order) {
    if (procs[i]->done() || (last[i] != Status::blocked_in && last[i] != Status::blocked_out)) continue;
    ++blocked;
    if (shown >= 12) continue;
    ++shown;
    const int c = procs[i]->blocked_on;
    os << "\n  " << net.tasks[i].name << (last[i] == Status::blocked_in ? " waits to read " : " waits to write ");
    if (c >= 0) {
      os << net.channels[c].name << " (" << x.ch[c].count << "/" << x.ch[c].cap << ")";
    }
  }
  if (blocked > shown) os << "\n  ... " << (blocked - shown) << " more";
  return os.str();
}

}  // namespace

SimTrace simulate(const Network& net, const std::vector<ref::Tensor>& frames, const SimConfig& cfg) {
  if (frames.empty()) throw ConfigError("simulate needs at least one frame");
  const int F = static_cast<int>(frames.size());
  const auto& in_node = net.graph.input_node();
  for (const auto& fr : frames) {
    if (fr.ch() != in_node.geom.och || fr.h() != in_node.geom.oh || fr.w() != in_node.geom.ow) {
      throw ConfigError("input frame shape does not match the model input");
    }
  }

  Ctx x;
  x.frames = F;
  x.first_input.assign(F, -1);
  x.frame_done.assign(F, -1);
  int64_t max_cap = 1;
  for (const auto& cd : net.channels) {
    Fifo f;
    f.cap = cd.capacity;
    f.tc = cd.token_codes;
    if (f.cap < 0) throw ConfigError("channel '" + cd.name + "' has negative capacity");
    f.buf.assign(size_t(std::max<int64_t>(f.cap, 1)) * f.tc, 0);
    max_cap = std::max(max_cap, cd.capacity);
    x.ch.push_back(std::move(f));
  }

  // Forwarded skip tokens are sized by the sink's och_par.
  std::vector<std::unique_ptr<Proc>> procs;
  for (const auto& t : net.tasks) {
    const auto& n = net.graph.node(t.node);
    switch (t.kind) {
      case TaskKind::dma_in: procs.push_back(std::make_unique<DmaIn>(t, frames)); break;
      case TaskKind::dma_out: procs.push_back(std::make_unique<DmaOut>(t, net.graph.node(t.node), F)); break;
      case TaskKind::demux: {
        auto d = std::make_unique<Demux>(t);
        d->set_frames(F);
        procs.push_back(std::move(d));
        break;
      }
      case TaskKind::window_slice:
      case TaskKind::reader: {
        const int ft = t.forward >= 0 ? net.channels[t.forward].token_codes : 1;
        procs.push_back(std::make_unique<WindowTap>(t, n.geom, F, ft));
        break;
      }
      case TaskKind::padding: procs.push_back(std::make_unique<Padding>(t, n.geom, net.taps.at(t.node), F)); break;
      case TaskKind::parameter: {
        // The parameter task of a merged downsample is paced by its host.
        const auto& la = net.plan.layer(t.node);
        const auto& host = n.merged_into.empty() ? n : net.graph.node(n.merged_into);
        const int lanes = net.plan.layer(host.id).ow_par;
        const int64_t pairs = int64_t{host.geom.oh} * (host.geom.ow / lanes);
        const int64_t period = int64_t{n.geom.ich} * la.och_groups();
        procs.push_back(std::make_unique<Parameter>(t, pairs * period, period, F, cfg.param_warmup));
        break;
      }
      case TaskKind::compute: procs.push_back(std::make_unique<Compute>(t, net, F, cfg.pipeline_depth)); break;
      case TaskKind::pool: procs.push_back(std::make_unique<GlobalPool>(t, n, F)); break;
    }
  }

  SimTrace tr;
  tr.tasks.resize(net.tasks.size());
  for (size_t i = 0; i < net.tasks.size(); ++i) {
    tr.tasks[i].name = net.tasks[i].name;
    tr.tasks[i].kind = net.tasks[i].kind;
  }
  int64_t limit = cfg.max_cycles;
  if (limit <= 0) {
    const auto p = alloc::predict(net.plan, 1.0);
    limit = (int64_t{F} + 4) * std::max<int64_t>(p.interval_cycles, 1) * 4 + p.latency_estimate_cycles * 4 + 100000;
  }
  const int64_t window = std::max<int64_t>(64, 4 * max_cap);
  int dma_out = -1;
  for (size_t i = 0; i < net.tasks.size(); ++i) {
    if (net.tasks[i].kind == TaskKind::dma_out) dma_out = int(i);
  }
  if (dma_out < 0) throw PlanningError("network has no output task");

  std::vector<Status> last(procs.size(), Status::idle);
  std::vector<char> prev_code(procs.size(), 0);
  int64_t last_progress = 0;
  for (x.cyc = 0;; ++x.cyc) {
    bool progress = false;
    for (size_t i = 0; i < procs.size(); ++i) {
      const Status s = procs[i]->step(x);
      last[i] = s;
      auto& st = tr.tasks[i];
      switch (s) {
        case Status::fired:
          ++st.fired;
          progress = true;
          break;
        case Status::busy: progress = true; break;
        case Status::blocked_in: ++st.blocked_in; break;
        case Status::blocked_out: ++st.blocked_out; break;
        case Status::idle: ++st.idle; break;
      }
      if (cfg.record_events && net.tasks[i].kind != TaskKind::window_slice) {
        const char code = status_code(s);
        if (code != prev_code[i]) {
          tr.events.push_back({x.cyc, int(i), code});
          prev_code[i] = code;
        }
      }
    }
    if (procs[dma_out]->done()) {
      tr.completed = true;
      break;
    }
    if (progress) {
      last_progress = x.cyc;
    } else if (x.cyc - last_progress > window) {
      tr.deadlock = true;
      tr.diagnostic = describe_deadlock(net, procs, last, x);
      break;
    }
    if (x.cyc >= limit) {
      tr.diagnostic = "cycle limit " + std::to_string(limit) + " reached before all frames completed";
      break;
    }
  }

  tr.cycles = x.cyc + 1;
  tr.frame_done = x.frame_done;
  tr.first_input_cycle = x.first_input[0];
  tr.outputs = std::move(x.outputs);
  tr.acc_max_abs = x.acc_max;
  tr.acc_overflows = x.acc_over;
  if (tr.completed) {
    tr.latency_cycles = tr.frame_done[0] - tr.first_input_cycle + 1;
    tr.steady_interval = F >= 2 ? tr.frame_done[F - 1] - tr.frame_done[F - 2] : tr.latency_cycles;
  }
  for (size_t i = 0; i < net.channels.size(); ++i) {
    const auto& f = x.ch[i];
    tr.channels.push_back({net.channels[i].name, f.cap, f.hw, f.total_push, f.total_pop, f.count});
  }
  return tr;
}

DeadlockCheck check_deadlock_free(const Network& net, int frames, uint64_t seed, const SimConfig& cfg) {
  if (frames < 1) throw ConfigError("need at least one frame");
  std::vector<ref::Tensor> in;
  for (int i = 0; i < frames; ++i) in.push_back(ref::random_input(net.graph, seed + uint64_t(i)));
  DeadlockCheck d;
  d.trace = simulate(net, in, cfg);
  d.pass = d.trace.completed;
  d.diagnostic = d.trace.completed ? "" : d.trace.diagnostic;
  return d;
}

Measurement measure(const SimTrace& trace, double freq_mhz) {
  if (freq_mhz <= 0) throw ConfigError("frequency must be positive");
  Measurement m;
  if (trace.completed && trace.steady_interval > 0) {
    m.fps = freq_mhz * 1e6 / double(trace.steady_interval);
    m.latency_ms = double(trace.latency_cycles) / (freq_mhz * 1e3);
  }
  for (const auto& t : trace.tasks) {
    if (t.kind != TaskKind::compute || trace.cycles == 0) continue;
    const double busy = double(t.fired) / double(trace.cycles);
    if (busy > m.bottleneck_busy) {
      m.bottleneck_busy = busy;
      m.bottleneck_task = t.name;
    }
  }
  for (const auto& c : trace.channels) {
    m.occupancy.emplace_back(c.name, c.capacity > 0 ? double(c.high_water) / double(c.capacity) : 0.0);
  }
  return m;
}

std::string events_csv(const Network& net, const SimTrace& trace) {
  std::ostringstream os;
  os << "cycle,task,event\n";
  for (const auto& e : trace.events) {
    const char* what = "fire";
    switch (e.what) {
      case 'i': what = "blocked_in"; break;
      case 'o': what = "blocked_out"; break;
      case '-': what = "idle"; break;
      case 'd': what = "drain"; break;
      default: break;
    }
    os << e.cycle << ',' << net.tasks[size_t(e.task)].name << ',' << what << '\n';
  }
  return os.str();
}

}  // namespace resflow::sim
