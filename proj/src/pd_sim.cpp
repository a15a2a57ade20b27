#include "bucketserve/pd_sim.hpp"

#include <algorithm>
#include <chrono>
#include <memory>
#include <numeric>
#include <ostream>
#include <queue>
#include <unordered_map>

#include <json.hpp>

#include "bucketserve/bucket_manager.hpp"
#include "bucketserve/errors.hpp"

namespace bucketserve {

void validate(const CostModel& c) {
  auto nonneg = [](double v, const char* f) {
    if (!(v >= 0)) throw ConfigError(std::string("cost.") + f, "must be >= 0");
  };
  nonneg(c.prefill_base, "prefill_base");
  nonneg(c.prefill_per_token, "prefill_per_token");
  nonneg(c.decode_step_base, "decode_step_base");
  nonneg(c.decode_per_kv_byte, "decode_per_kv_byte");
  nonneg(c.transfer_latency, "transfer_latency");
  if (!(c.transfer_bandwidth > 0))
    throw ConfigError("cost.transfer_bandwidth", "must be > 0");
}

void validate(const SimConfig& cfg) {
  validate(cfg.model);
  validate(cfg.cluster.gpu);
  validate(cfg.cost);
  if (cfg.cluster.prefill_workers < 1)
    throw ConfigError("cluster.prefill_workers", "must be >= 1");
  if (cfg.cluster.decode_workers < 1)
    throw ConfigError("cluster.decode_workers", "must be >= 1");
  if (!(cfg.tick_interval > 0))
    throw ConfigError("tick_interval", "must be > 0");
  if (!(cfg.split_threshold >= 0 && cfg.split_threshold <= 1))
    throw ConfigError("split_threshold", "must lie in [0, 1]");
  if (cfg.max_output_tokens < 1)
    throw ConfigError("max_output_tokens", "must be >= 1");
  if (auto* s = std::get_if<StaticBatchPolicy>(&cfg.policy); s && s->fixed_n < 1)
    throw ConfigError("policy", "static batch size must be >= 1");
  // A decode slot never exceeds L_max, so one full-length slot plus its
  // lookahead token must fit or decode could stall.
  Bytes need = cfg.model.bytes_per_token() *
               static_cast<Bytes>(cfg.model.max_seq_len + 1);
  if (safe_memory(cfg.cluster.gpu) < need)
    throw ConfigError("cluster.gpu",
                      "safe memory cannot hold one L_max context (" +
                          std::to_string(need) + " bytes)");
}

Seconds prefill_time(const BatchPlan& plan, const CostModel& cost,
                     MemoryAccounting accounting) {
  if (plan.ids.empty()) throw DomainError("prefill_time of an empty plan");
  double tokens = accounting == MemoryAccounting::Exact
                      ? static_cast<double>(plan.token_sum)
                      : static_cast<double>(plan.s_max) *
                            static_cast<double>(plan.size());
  return cost.prefill_base + cost.prefill_per_token * tokens;
}

Seconds transfer_time(Bytes bytes, const CostModel& cost) {
  return cost.transfer_latency + static_cast<double>(bytes) / cost.transfer_bandwidth;
}

Seconds decode_step_time(Bytes resident_kv, const CostModel& cost) {
  return cost.decode_step_base +
         cost.decode_per_kv_byte * static_cast<double>(resident_kv);
}

Bytes DecodeWorker::footprint() const {
  return per_token_ * static_cast<Bytes>(context_sum_);
}

Bytes DecodeWorker::projected_footprint() const {
  return per_token_ * static_cast<Bytes>(context_sum_ + static_cast<Tokens>(slots_.size()));
}

Bytes DecodeWorker::free_memory() const {
  Bytes used = footprint();
  return used >= safe_ ? 0 : safe_ - used;
}

bool DecodeWorker::fits_with(Tokens extra_context) const {
  Tokens projected = context_sum_ + static_cast<Tokens>(slots_.size()) +
                     extra_context + 1;
  return per_token_ * static_cast<Bytes>(projected) <= safe_;
}

DecodeWorker::Admission DecodeWorker::admit(const DecodeSlot& slot) {
  if (waiting_.empty() && fits_with(slot.context)) {
    slots_.push_back(slot);
    context_sum_ += slot.context;
    return Admission::Admitted;
  }
  waiting_.push_back(slot);
  return Admission::Deferred;
}

DecodeWorker::StepOutcome DecodeWorker::step() {
  StepOutcome out;
  for (auto& s : slots_) {
    ++s.context;
    ++context_sum_;
    --s.remaining;
  }
  std::vector<DecodeSlot> keep;
  keep.reserve(slots_.size());
  for (auto& s : slots_) {
    if (s.remaining <= 0) {
      out.completed.push_back(s.request);
      context_sum_ -= s.context;
    } else {
      keep.push_back(s);
    }
  }
  slots_ = std::move(keep);
  return out;
}

std::size_t DecodeWorker::handle_growth_overflow() {
  std::size_t suspended = 0;
  while (!slots_.empty() && projected_footprint() > safe_) {
    DecodeSlot s = slots_.back();
    slots_.pop_back();
    context_sum_ -= s.context;
    s.resumed = true;
    waiting_.push_front(s);
    ++suspended;
  }
  return suspended;
}

std::vector<DecodeSlot> DecodeWorker::admit_waiting() {
  std::vector<DecodeSlot> admitted;
  while (!waiting_.empty() && fits_with(waiting_.front().context)) {
    slots_.push_back(waiting_.front());
    context_sum_ += waiting_.front().context;
    admitted.push_back(waiting_.front());
    waiting_.pop_front();
  }
  return admitted;
}

std::size_t pick_decode_worker(std::span<const DecodeWorker> workers) {
  if (workers.empty()) throw DomainError("no decode workers");
  std::size_t best = 0;
  for (std::size_t i = 1; i < workers.size(); ++i)
    if (workers[i].free_memory() > workers[best].free_memory()) best = i;
  return best;
}

std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::Arrival: return "arrival";
    case EventKind::SchedulerTick: return "tick";
    case EventKind::PrefillDone: return "prefill_done";
    case EventKind::TransferDone: return "transfer_done";
    case EventKind::DecodeStepDone: return "decode_step_done";
    case EventKind::Completion: return "completion";
  }
  return "?";
}

namespace {

using Clock = std::chrono::steady_clock;

struct Event {
  Seconds time;
  EventKind kind;
  std::uint64_t seq;
  std::size_t a;  // request, batch or worker index depending on kind
  std::size_t b;
};

struct EventAfter {
  bool operator()(const Event& x, const Event& y) const {
    if (x.time != y.time) return x.time > y.time;
    if (x.kind != y.kind) return x.kind > y.kind;
    return x.seq > y.seq;
  }
};

struct SchedulerStats {
  std::vector<RequestId> rejected;
  std::size_t halvings = 0;
  std::vector<StructuralChange> changes;
  double bucketing_wall = 0;
  std::uint64_t assign_calls = 0;
  std::uint64_t adjust_calls = 0;
};

double elapsed(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

// Prefill-side request queueing for one policy.
class PrefillScheduler {
 public:
  virtual ~PrefillScheduler() = default;
  virtual void on_arrival(const QueuedRequest& r) = 0;
  virtual void adjust(Seconds /*now*/) {}
  virtual std::optional<BatchPlan> next(Seconds now, Bytes safe, Bytes pledged,
                                        bool flush) = 0;
  virtual std::size_t queued() const = 0;
  virtual std::vector<std::size_t> bucket_queue() const { return {queued()}; }
  virtual std::optional<std::pair<std::vector<Tokens>, std::vector<TokenRange>>>
  waste_inputs() const {
    return std::nullopt;
  }
  double mean_queued_len() const {
    std::size_t n = queued();
    return n == 0 ? 0.0 : static_cast<double>(queued_tokens_) / static_cast<double>(n);
  }
  SchedulerStats stats;

 protected:
  Tokens queued_tokens_ = 0;
  void note_removed(const BatchPlan& plan) { queued_tokens_ -= plan.token_sum; }
  void note_rejected(Tokens len) { queued_tokens_ -= len; }
};

class BucketServeScheduler final : public PrefillScheduler {
 public:
  BucketServeScheduler(const SimConfig& cfg, Bytes safe)
      : cfg_(cfg),
        set_(cfg.model.max_seq_len, cfg.split_threshold),
        controller_(cfg.model, safe) {}

  void on_arrival(const QueuedRequest& r) override {
    auto t0 = Clock::now();
    set_.assign(r);
    stats.bucketing_wall += elapsed(t0);
    ++stats.assign_calls;
    queued_tokens_ += r.input_len;
    lengths_[r.id] = r.input_len;
    stale_ = true;
  }

  void adjust(Seconds now) override {
    std::size_t n_max = controller_.n_max(mean_queued_len());
    if (n_max < 1) return;
    // Same contents and N_max as a call that changed nothing: same answer.
    if (!stale_ && n_max == last_n_max_) return;
    auto t0 = Clock::now();
    auto changes = set_.adjust_buckets(n_max, now);
    stats.bucketing_wall += elapsed(t0);
    ++stats.adjust_calls;
    stale_ = !changes.empty();
    last_n_max_ = n_max;
    stats.changes.insert(stats.changes.end(), changes.begin(), changes.end());
  }

  std::optional<BatchPlan> next(Seconds now, Bytes safe, Bytes pledged,
                                bool) override {
    for (TaskClass c : {TaskClass::Online, TaskClass::Offline}) {
      auto idx = select_bucket(set_, c);
      if (!idx) continue;
      BatchContext ctx{&cfg_.model, safe, pledged, cfg_.accounting,
                       cfg_.dispatch.for_class(c), now};
      FormResult res = form_batch(set_.bucket(*idx), c, ctx);
      if (res.plan || !res.rejected.empty()) stale_ = true;
      for (RequestId id : res.rejected) note_rejected(lengths_.at(id));
      stats.rejected.insert(stats.rejected.end(), res.rejected.begin(),
                            res.rejected.end());
      if (res.plan) {
        note_removed(*res.plan);
        return res.plan;
      }
    }
    return std::nullopt;
  }

  std::size_t queued() const override { return set_.total_requests(); }

  std::vector<std::size_t> bucket_queue() const override {
    std::vector<std::size_t> out;
    for (const auto& b : set_.buckets()) out.push_back(b.size());
    return out;
  }

  std::optional<std::pair<std::vector<Tokens>, std::vector<TokenRange>>>
  waste_inputs() const override {
    std::vector<Tokens> lens;
    for (const auto& b : set_.buckets())
      for (const auto& r : b.requests()) lens.push_back(r.input_len);
    return std::make_pair(std::move(lens), set_.ranges());
  }

  const BucketSet& set() const { return set_; }

 private:
  const SimConfig& cfg_;
  BucketSet set_;
  BatchController controller_;
  std::unordered_map<RequestId, Tokens> lengths_;
  bool stale_ = true;
  std::size_t last_n_max_ = 0;
};

class ContinuousScheduler final : public PrefillScheduler {
 public:
  explicit ContinuousScheduler(const SimConfig& cfg)
      : cfg_(cfg), queue_(TokenRange{0, cfg.model.max_seq_len}) {}

  void on_arrival(const QueuedRequest& r) override {
    queue_.push(r);
    queued_tokens_ += r.input_len;
    lengths_[r.id] = r.input_len;
  }

  std::optional<BatchPlan> next(Seconds now, Bytes safe, Bytes pledged,
                                bool) override {
    for (TaskClass c : {TaskClass::Online, TaskClass::Offline}) {
      if (queue_.count(c) == 0) continue;
      FormResult res = schedule_continuous_nobucket(queue_, c, cfg_.model, safe,
                                                    pledged, cfg_.accounting, now);
      for (RequestId id : res.rejected) note_rejected(lengths_.at(id));
      stats.rejected.insert(stats.rejected.end(), res.rejected.begin(),
                            res.rejected.end());
      if (res.plan) {
        note_removed(*res.plan);
        return res.plan;
      }
    }
    return std::nullopt;
  }

  std::size_t queued() const override { return queue_.size(); }

  std::optional<std::pair<std::vector<Tokens>, std::vector<TokenRange>>>
  waste_inputs() const override {
    std::vector<Tokens> lens;
    for (const auto& r : queue_.requests()) lens.push_back(r.input_len);
    return std::make_pair(std::move(lens),
                          std::vector<TokenRange>{queue_.range()});
  }

 private:
  const SimConfig& cfg_;
  Bucket queue_;
  std::unordered_map<RequestId, Tokens> lengths_;
};

class StaticScheduler final : public PrefillScheduler {
 public:
  StaticScheduler(const SimConfig& cfg, std::size_t fixed_n)
      : cfg_(cfg), fixed_n_(fixed_n) {}

  void on_arrival(const QueuedRequest& r) override {
    queue_.push_back(r);
    queued_tokens_ += r.input_len;
    lengths_[r.id] = r.input_len;
  }

  std::optional<BatchPlan> next(Seconds now, Bytes safe, Bytes pledged,
                                bool flush) override {
    StaticResult res = schedule_static(queue_, fixed_n_, cfg_.model, safe, pledged,
                                       flush, now, cfg_.max_output_tokens);
    for (RequestId id : res.rejected) note_rejected(lengths_.at(id));
    stats.rejected.insert(stats.rejected.end(), res.rejected.begin(),
                          res.rejected.end());
    stats.halvings += static_cast<std::size_t>(res.halvings);
    if (res.plan) note_removed(*res.plan);
    return res.plan;
  }

  std::size_t queued() const override { return queue_.size(); }

 private:
  const SimConfig& cfg_;
  std::size_t fixed_n_;
  std::deque<QueuedRequest> queue_;
  std::unordered_map<RequestId, Tokens> lengths_;
};

struct PrefillWorker {
  bool busy = false;
  Bytes pledged = 0;
};

// Static baseline: prefill and decode share the worker and the batch keeps
// its padded shape until its longest request finishes.
struct CoupledWorker {
  bool busy = false;
  std::size_t batch = 0;
  std::vector<std::size_t> rows;  // request indices still generating
  std::size_t shape_rows = 0;
  Tokens s_max = 0;
  Tokens steps = 0;
};

struct BatchRecord {
  BatchPlan plan;
  std::size_t worker = 0;
  std::size_t pending_transfers = 0;
};

class Simulation {
 public:
  Simulation(const Trace& trace, const SimConfig& cfg)
      : cfg_(cfg), reqs_(trace), safe_(safe_memory(cfg.cluster.gpu)) {
    validate(cfg);
    for (std::size_t i = 0; i < reqs_.size(); ++i) {
      const Request& r = reqs_[i];
      if (i > 0 && r.arrival_time < reqs_[i - 1].arrival_time)
        throw DomainError("trace not sorted by arrival_time");
      if (r.input_len < 1 || r.input_len >= cfg.model.max_seq_len)
        throw DomainError("request " + std::to_string(r.id) +
                          ": input_len outside [1, L_max)");
      if (r.output_len < 1)
        throw DomainError("request " + std::to_string(r.id) + ": output_len < 1");
      if (r.input_len + r.output_len > cfg.model.max_seq_len)
        throw DomainError("request " + std::to_string(r.id) +
                          ": context would exceed L_max");
      if (!index_.emplace(r.id, i).second)
        throw DomainError("duplicate request id " + std::to_string(r.id));
      reqs_[i].ts = {};
      reqs_[i].status = RequestStatus::Pending;
    }
    if (auto* s = std::get_if<StaticBatchPolicy>(&cfg.policy)) {
      coupled_ = true;
      sched_ = std::make_unique<StaticScheduler>(cfg, s->fixed_n);
      coupled_workers_.resize(cfg.cluster.prefill_workers + cfg.cluster.decode_workers);
    } else {
      if (std::holds_alternative<BucketServePolicy>(cfg.policy))
        sched_ = std::make_unique<BucketServeScheduler>(cfg, safe_);
      else
        sched_ = std::make_unique<ContinuousScheduler>(cfg);
      prefill_.resize(cfg.cluster.prefill_workers);
      for (std::size_t i = 0; i < cfg.cluster.decode_workers; ++i)
        decode_.emplace_back(cfg.model, safe_);
    }
    arrivals_remaining_ = reqs_.size();
  }

  SimResult run() {
    auto wall0 = Clock::now();
    for (std::size_t i = 0; i < reqs_.size(); ++i)
      push(reqs_[i].arrival_time, EventKind::Arrival, i);
    while (!events_.empty()) {
      Event e = events_.top();
      events_.pop();
      if (e.time < now_) throw InternalError("event queue went back in time");
      now_ = e.time;
      dispatch(e);
      check_memory();
    }
    return finish(elapsed(wall0));
  }

 private:
  void push(Seconds t, EventKind k, std::size_t a, std::size_t b = 0) {
    events_.push(Event{t, k, seq_++, a, b});
  }

  void log(EventKind k, std::optional<RequestId> id, std::optional<std::size_t> worker,
           const std::string& detail) {
    if (!cfg_.event_log) return;
    nlohmann::json j = {{"t", now_}, {"kind", to_string(k)}};
    if (id) j["request_id"] = *id;
    if (worker) j["worker"] = *worker;
    j["detail"] = detail;
    *cfg_.event_log << j.dump() << '\n';
  }

  void dispatch(const Event& e) {
    switch (e.kind) {
      case EventKind::Arrival: on_arrival(e.a); break;
      case EventKind::SchedulerTick: on_tick(); break;
      case EventKind::PrefillDone: on_prefill_done(e.a); break;
      case EventKind::TransferDone: on_transfer_done(e.a, e.b); break;
      case EventKind::DecodeStepDone:
        coupled_ ? on_coupled_step_done(e.a) : on_decode_step_done(e.a);
        break;
      case EventKind::Completion: break;
    }
  }

  bool any_idle_worker() const {
    if (coupled_)
      return std::any_of(coupled_workers_.begin(), coupled_workers_.end(),
                         [](const CoupledWorker& w) { return !w.busy; });
    return std::any_of(prefill_.begin(), prefill_.end(),
                       [](const PrefillWorker& w) { return !w.busy; });
  }

  void ensure_tick() {
    if (!tick_pending_ && sched_->queued() > 0) {
      tick_pending_ = true;
      push(now_ + cfg_.tick_interval, EventKind::SchedulerTick, 0);
    }
  }

  void on_arrival(std::size_t i) {
    Request& r = reqs_[i];
    r.ts.enqueue = now_;
    --arrivals_remaining_;
    monitor_.record_event({now_, StreamKind::Arrival, {}});
    sched_->on_arrival(queued_view(r));
    log(EventKind::Arrival, r.id, std::nullopt,
        "input_len=" + std::to_string(r.input_len));
    if (any_idle_worker()) schedule_pass();
    ensure_tick();
  }

  void on_tick() {
    tick_pending_ = false;
    schedule_pass();
    snapshot();
    log(EventKind::SchedulerTick, std::nullopt, std::nullopt,
        "queued=" + std::to_string(sched_->queued()));
    ensure_tick();
  }

  void schedule_pass() {
    sched_->adjust(now_);
    drain_scheduler_stats();
    sample_expected_waste();
    const bool flush = arrivals_remaining_ == 0;
    if (coupled_) {
      for (std::size_t w = 0; w < coupled_workers_.size(); ++w) {
        if (coupled_workers_[w].busy) continue;
        if (sched_->queued() == 0) break;
        auto plan = sched_->next(now_, safe_, 0, flush);
        drain_scheduler_stats();
        if (!plan) break;
        start_coupled(w, std::move(*plan));
      }
      return;
    }
    for (std::size_t w = 0; w < prefill_.size(); ++w) {
      if (prefill_[w].busy) continue;
      if (sched_->queued() == 0) break;
      auto plan = sched_->next(now_, safe_, prefill_[w].pledged, flush);
      drain_scheduler_stats();
      if (plan) start_prefill(w, std::move(*plan));
    }
  }

  void drain_scheduler_stats() {
    auto& st = sched_->stats;
    for (RequestId id : st.rejected) {
      Request& r = reqs_[index_.at(id)];
      r.status = RequestStatus::Rejected;
      ++oversize_;
      monitor_.record_event({now_, StreamKind::Rejection, {}});
      log(EventKind::SchedulerTick, id, std::nullopt, "rejected_oversize");
    }
    st.rejected.clear();
    for (const auto& c : st.changes) {
      monitor_.record_event({now_, StreamKind::Structural, std::string(to_string(c.kind))});
      std::string detail = std::string(to_string(c.kind)) + " [" +
                           std::to_string(c.parent.low) + "," +
                           std::to_string(c.parent.up) + ")";
      if (c.midpoint) detail += " mid=" + std::to_string(*c.midpoint);
      log(EventKind::SchedulerTick, std::nullopt, std::nullopt, detail);
    }
    st.changes.clear();
  }

  void sample_expected_waste() {
    if (sched_->queued() == 0 || now_ < next_waste_sample_) return;
    auto inputs = sched_->waste_inputs();
    if (!inputs || inputs->first.empty()) return;
    auto hist = LengthHistogram::from_samples(inputs->first);
    waste_trajectory_.emplace_back(now_, expected_waste(hist, inputs->second));
    next_waste_sample_ = now_ + 1.0;
  }

  void record_batch(const BatchPlan& plan) {
    batches_ids_.push_back(plan.ids);
    batch_waste_sum_ += waste_ratio(plan.lengths);
    batch_size_sum_ += plan.size();
    monitor_.record_event({now_, StreamKind::Batch, {}});
    for (RequestId id : plan.ids) reqs_[index_.at(id)].ts.prefill_start = now_;
  }

  void start_prefill(std::size_t w, BatchPlan plan) {
    record_batch(plan);
    Seconds dur = prefill_time(plan, cfg_.cost, cfg_.accounting);
    last_batch_latency_ = dur;
    double useful = cfg_.cost.prefill_per_token * static_cast<double>(plan.token_sum);
    prefill_util_.add(now_, now_ + dur, dur > 0 ? useful / dur : 0.0);
    prefill_[w].busy = true;
    prefill_[w].pledged += plan.footprint;
    log(EventKind::SchedulerTick, std::nullopt, w,
        "prefill_start n=" + std::to_string(plan.size()) +
            " s_max=" + std::to_string(plan.s_max));
    batches_.push_back({std::move(plan), w, 0});
    push(now_ + dur, EventKind::PrefillDone, batches_.size() - 1);
  }

  void on_prefill_done(std::size_t b) {
    if (coupled_) return on_coupled_prefill_done(b);
    BatchRecord& rec = batches_[b];
    prefill_[rec.worker].busy = false;
    rec.pending_transfers = rec.plan.size();
    const Bytes per_token = cfg_.model.bytes_per_token();
    for (std::size_t k = 0; k < rec.plan.size(); ++k) {
      std::size_t i = index_.at(rec.plan.ids[k]);
      reqs_[i].ts.prefill_end = now_;
      Bytes kv = per_token * static_cast<Bytes>(reqs_[i].input_len);
      push(now_ + transfer_time(kv, cfg_.cost), EventKind::TransferDone, i, b);
    }
    log(EventKind::PrefillDone, std::nullopt, rec.worker,
        "batch=" + std::to_string(b));
    schedule_pass();
  }

  void on_transfer_done(std::size_t i, std::size_t b) {
    Request& r = reqs_[i];
    r.ts.transfer_end = now_;
    BatchRecord& rec = batches_[b];
    bool released = false;
    if (--rec.pending_transfers == 0) {
      prefill_[rec.worker].pledged -= rec.plan.footprint;
      released = true;
    }
    std::size_t d = pick_decode_worker(decode_);
    auto outcome = decode_[d].admit(DecodeSlot{i, r.input_len, r.output_len, false});
    log(EventKind::TransferDone, r.id, d,
        outcome == DecodeWorker::Admission::Admitted ? "admitted" : "deferred");
    if (!decode_[d].stepping && !decode_[d].slots().empty()) start_decode_step(d);
    if (released) schedule_pass();
  }

  void start_decode_step(std::size_t d) {
    DecodeWorker& w = decode_[d];
    Bytes resident = w.footprint();
    Seconds dur = decode_step_time(resident, cfg_.cost) + pending_recompute_[d];
    pending_recompute_[d] = 0;
    decode_util_.add(now_, now_ + dur,
                     static_cast<double>(resident) / static_cast<double>(safe_));
    w.stepping = true;
    push(now_ + dur, EventKind::DecodeStepDone, d);
  }

  void complete(std::size_t i, std::optional<std::size_t> worker) {
    Request& r = reqs_[i];
    r.ts.completion = now_;
    r.status = RequestStatus::Completed;
    monitor_.record_event({now_, StreamKind::Completion, {}});
    log(EventKind::Completion, r.id, worker, "");
  }

  void on_decode_step_done(std::size_t d) {
    DecodeWorker& w = decode_[d];
    emitted_tokens_ += w.slots().size();
    auto out = w.step();
    for (std::size_t i : out.completed) {
      if (!reqs_[i].ts.first_token) reqs_[i].ts.first_token = now_;
      complete(i, d);
    }
    for (const auto& s : w.slots())
      if (!reqs_[s.request].ts.first_token) reqs_[s.request].ts.first_token = now_;
    std::size_t suspended = w.handle_growth_overflow();
    for (std::size_t k = 0; k < suspended; ++k) {
      ++suspensions_;
      monitor_.record_event({now_, StreamKind::Suspension, {}});
    }
    if (suspended) log(EventKind::DecodeStepDone, std::nullopt, d,
                       "suspended=" + std::to_string(suspended));
    for (const auto& s : w.admit_waiting()) {
      if (s.resumed && cfg_.resume == ResumeMode::Recompute)
        pending_recompute_[d] += cfg_.cost.prefill_base +
                                 cfg_.cost.prefill_per_token * static_cast<double>(s.context);
      log(EventKind::DecodeStepDone, reqs_[s.request].id, d,
          s.resumed ? "resumed" : "admitted");
    }
    w.stepping = false;
    if (!w.slots().empty()) start_decode_step(d);
  }

  void start_coupled(std::size_t w, BatchPlan plan) {
    record_batch(plan);
    Seconds dur = prefill_time(plan, cfg_.cost, MemoryAccounting::Padded);
    last_batch_latency_ = dur;
    double useful = cfg_.cost.prefill_per_token * static_cast<double>(plan.token_sum);
    prefill_util_.add(now_, now_ + dur, dur > 0 ? useful / dur : 0.0);
    CoupledWorker& cw = coupled_workers_[w];
    cw.busy = true;
    cw.rows.clear();
    for (RequestId id : plan.ids) cw.rows.push_back(index_.at(id));
    cw.shape_rows = plan.size();
    cw.s_max = plan.s_max;
    cw.steps = 0;
    log(EventKind::SchedulerTick, std::nullopt, w,
        "static_batch n=" + std::to_string(plan.size()) +
            " s_max=" + std::to_string(plan.s_max));
    batches_.push_back({std::move(plan), w, 0});
    cw.batch = batches_.size() - 1;
    push(now_ + dur, EventKind::PrefillDone, cw.batch);
  }

  Bytes coupled_footprint(const CoupledWorker& cw) const {
    if (!cw.busy) return 0;
    return cfg_.model.bytes_per_token() *
           static_cast<Bytes>(cw.s_max + cw.steps) * cw.shape_rows;
  }

  void on_coupled_prefill_done(std::size_t b) {
    std::size_t w = batches_[b].worker;
    for (std::size_t i : coupled_workers_[w].rows) {
      reqs_[i].ts.prefill_end = now_;
      reqs_[i].ts.transfer_end = now_;
    }
    log(EventKind::PrefillDone, std::nullopt, w, "batch=" + std::to_string(b));
    start_coupled_step(w);
  }

  void start_coupled_step(std::size_t w) {
    CoupledWorker& cw = coupled_workers_[w];
    // Padded rows are read every step, finished or not.
    Bytes resident = cfg_.model.bytes_per_token() *
                     static_cast<Bytes>(cw.s_max + cw.steps) * cw.shape_rows;
    Seconds dur = decode_step_time(resident, cfg_.cost);
    decode_util_.add(now_, now_ + dur,
                     static_cast<double>(cw.rows.size()) /
                         static_cast<double>(cw.shape_rows));
    push(now_ + dur, EventKind::DecodeStepDone, w);
  }

  void on_coupled_step_done(std::size_t w) {
    CoupledWorker& cw = coupled_workers_[w];
    ++cw.steps;
    emitted_tokens_ += cw.rows.size();
    std::vector<std::size_t> still;
    for (std::size_t i : cw.rows) {
      Request& r = reqs_[i];
      if (!r.ts.first_token) r.ts.first_token = now_;
      if (cw.steps >= r.output_len)
        complete(i, w);
      else
        still.push_back(i);
    }
    cw.rows = std::move(still);
    if (!cw.rows.empty()) {
      start_coupled_step(w);
      return;
    }
    // Footprint is checked before release so the final shape is covered.
    check_memory();
    cw.busy = false;
    log(EventKind::DecodeStepDone, std::nullopt, w,
        "static_batch_done batch=" + std::to_string(cw.batch));
    schedule_pass();
  }

  void violation(const std::string& what) {
    ++violations_;
    if (cfg_.abort_on_violation)
      throw InternalError("memory safety violated at t=" + std::to_string(now_) +
                          ": " + what);
  }

  void check_memory() {
    ++memory_checks_;
    for (std::size_t w = 0; w < prefill_.size(); ++w) {
      peak_prefill_ = std::max(peak_prefill_, prefill_[w].pledged);
      if (prefill_[w].pledged > safe_)
        violation("prefill worker " + std::to_string(w));
    }
    for (std::size_t d = 0; d < decode_.size(); ++d) {
      Bytes fp = decode_[d].footprint();
      peak_decode_ = std::max(peak_decode_, fp);
      if (fp > safe_) violation("decode worker " + std::to_string(d));
    }
    for (std::size_t w = 0; w < coupled_workers_.size(); ++w) {
      Bytes fp = coupled_footprint(coupled_workers_[w]);
      peak_decode_ = std::max(peak_decode_, fp);
      if (fp > safe_) violation("coupled worker " + std::to_string(w));
    }
  }

  void snapshot() {
    MonitorSnapshot s;
    s.time = now_;
    for (const auto& p : prefill_) s.worker_memory.push_back(p.pledged);
    for (const auto& d : decode_) s.worker_memory.push_back(d.footprint());
    for (const auto& c : coupled_workers_) s.worker_memory.push_back(coupled_footprint(c));
    s.bucket_queue = sched_->bucket_queue();
    s.prefill_queue = sched_->queued();
    for (const auto& d : decode_) s.decode_queue += d.waiting().size();
    s.arrival_rate = monitor_.arrival_rate(now_);
    s.mean_queued_len = sched_->mean_queued_len();
    s.recent_batch_latency = last_batch_latency_;
    peak_queue_ = std::max(peak_queue_, s.prefill_queue);
    monitor_.record_snapshot(std::move(s));
  }

  SimResult finish(double wall_total) {
    SimResult out;
    MetricsReport& rep = out.report;
    rep.policy = policy_label(cfg_.policy);
    rep.requests = reqs_.size();
    rep.safe_memory = safe_;

    std::vector<double> ttft, e2e;
    Seconds first_arrival = reqs_.empty() ? 0.0 : reqs_.front().arrival_time;
    Seconds last_arrival = reqs_.empty() ? 0.0 : reqs_.back().arrival_time;
    Seconds last_completion = first_arrival;
    for (const auto& r : reqs_) {
      rep.input_tokens += static_cast<std::uint64_t>(r.input_len);
      if (r.status == RequestStatus::Rejected) {
        ++rep.rejected;
        continue;
      }
      if (r.status != RequestStatus::Completed)
        throw InternalError("request " + std::to_string(r.id) + " never finished");
      const auto& ts = r.ts;
      if (!(r.arrival_time <= *ts.enqueue && *ts.enqueue <= *ts.prefill_start &&
            *ts.prefill_start <= *ts.prefill_end &&
            *ts.prefill_end <= *ts.transfer_end &&
            *ts.transfer_end <= *ts.first_token && *ts.first_token <= *ts.completion))
        throw InternalError("timestamps out of order for request " +
                            std::to_string(r.id));
      ++rep.completed;
      rep.output_tokens += static_cast<std::uint64_t>(r.output_len);
      ttft.push_back(*ts.first_token - r.arrival_time);
      e2e.push_back(*ts.completion - r.arrival_time);
      rep.phase_totals.queue += *ts.prefill_start - r.arrival_time;
      rep.phase_totals.prefill += *ts.prefill_end - *ts.prefill_start;
      rep.phase_totals.transfer += *ts.transfer_end - *ts.prefill_end;
      rep.phase_totals.decode += *ts.completion - *ts.transfer_end;
      rep.e2e_total += *ts.completion - r.arrival_time;
      last_completion = std::max(last_completion, *ts.completion);
    }
    if (rep.completed > 0) rep.makespan_s = last_completion - first_arrival;
    if (last_arrival > first_arrival)
      rep.client_rps = static_cast<double>(rep.requests) / (last_arrival - first_arrival);
    if (rep.makespan_s > 0) {
      rep.server_rps = static_cast<double>(rep.completed) / rep.makespan_s;
      rep.tokens_per_s = static_cast<double>(rep.output_tokens) / rep.makespan_s;
    }
    rep.slo_attainment = slo_attainment(reqs_, cfg_.slo);
    for (const auto& r : reqs_)
      if (r.task_class == TaskClass::Online && (r.slo_ttft || r.slo_e2e ||
                                                cfg_.slo.ttft || cfg_.slo.e2e))
        ++rep.slo_online_requests;
    rep.ttft = percentiles(std::move(ttft));
    rep.e2e = percentiles(std::move(e2e));

    rep.batches = batches_ids_.size();
    if (rep.batches > 0) {
      rep.mean_batch_size = static_cast<double>(batch_size_sum_) /
                            static_cast<double>(rep.batches);
      rep.mean_batch_waste = batch_waste_sum_ / static_cast<double>(rep.batches);
    }
    rep.expected_waste_trajectory = waste_trajectory_;
    rep.splits = monitor_.structural("split");
    rep.merges = monitor_.structural("merge");
    rep.skipped_splits = monitor_.structural("skip");
    rep.suspensions = suspensions_;
    rep.static_halvings = sched_->stats.halvings;
    rep.oversize_rejections = oversize_;
    rep.peak_prefill_footprint = peak_prefill_;
    rep.peak_decode_footprint = peak_decode_;
    rep.memory_checks = memory_checks_;
    rep.memory_violations = violations_;

    Seconds end = std::max(last_completion, now_);
    std::size_t pworkers = coupled_ ? coupled_workers_.size() : prefill_.size();
    std::size_t dworkers = coupled_ ? coupled_workers_.size() : decode_.size();
    rep.utilization_prefill = prefill_util_.ratio(first_arrival, end, pworkers);
    rep.utilization_decode = decode_util_.ratio(first_arrival, end, dworkers);
    rep.monitor_snapshots = monitor_.snapshots().size();
    rep.peak_queue_len = peak_queue_;

    TimingReport t;
    t.wall_total_s = wall_total;
    t.bucketing_wall_s = sched_->stats.bucketing_wall;
    t.bucketing_fraction = wall_total > 0 ? t.bucketing_wall_s / wall_total : 0.0;
    t.assign_calls = sched_->stats.assign_calls;
    t.adjust_calls = sched_->stats.adjust_calls;
    rep.timing = t;

    // Token conservation: every completed request emitted exactly output_len.
    if (rep.output_tokens != emitted_tokens_)
      throw InternalError("token conservation violated");

    out.requests = reqs_;
    out.batches = std::move(batches_ids_);
    out.snapshots = monitor_.snapshots();
    return out;
  }

  const SimConfig& cfg_;
  Trace reqs_;
  Bytes safe_;
  std::unordered_map<RequestId, std::size_t> index_;
  std::unique_ptr<PrefillScheduler> sched_;
  bool coupled_ = false;
  std::vector<PrefillWorker> prefill_;
  std::vector<DecodeWorker> decode_;
  std::unordered_map<std::size_t, Seconds> pending_recompute_;
  std::vector<CoupledWorker> coupled_workers_;
  std::vector<BatchRecord> batches_;
  std::vector<std::vector<RequestId>> batches_ids_;

  std::priority_queue<Event, std::vector<Event>, EventAfter> events_;
  std::uint64_t seq_ = 0;
  Seconds now_ = 0;
  bool tick_pending_ = false;
  std::size_t arrivals_remaining_ = 0;

  Monitor monitor_;
  UtilizationTracker prefill_util_, decode_util_;
  std::vector<std::pair<Seconds, double>> waste_trajectory_;
  Seconds next_waste_sample_ = 0;
  double batch_waste_sum_ = 0;
  std::size_t batch_size_sum_ = 0;
  std::size_t suspensions_ = 0;
  std::size_t oversize_ = 0;
  Bytes peak_prefill_ = 0, peak_decode_ = 0;
  std::uint64_t memory_checks_ = 0, violations_ = 0;
  std::size_t peak_queue_ = 0;
  Seconds last_batch_latency_ = 0;
  std::uint64_t emitted_tokens_ = 0;
};

}  // namespace

SimResult run(const Trace& trace, const SimConfig& cfg) {
  Simulation sim(trace, cfg);
  return sim.run();
}

}  // namespace bucketserve
