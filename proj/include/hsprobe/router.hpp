#pragma once

#include "hsprobe/feature_store.hpp"
#include "hsprobe/metrics.hpp"
#include "hsprobe/probes.hpp"

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace hsprobe {

inline constexpr std::string_view kToolkitVersion = "0.1.0";

// Threshold rule: p >= tau answers directly, anything lower falls back.
// answer_fraction < 1 scores only the first ceil(fraction * n_answer) answer
// tokens of question+answer queries (partial-answer routing).
struct RoutePolicy {
    double tau = 0.5;
    std::string fallback_name = "fallback";
    SegmentMode mode = SegmentMode::question_only;
    double answer_fraction = 1.0;

    void validate() const;
};

enum class Route { answer_direct, fallback };

std::string_view to_string(Route route) noexcept;  // "ANSWER_DIRECT" / "FALLBACK"

struct RouteDecision {
    Route route = Route::fallback;
    Score score;
    std::chrono::nanoseconds decision_time{0};
};

RouteDecision decide(const Score& score, const RoutePolicy& policy) noexcept;
RouteDecision decide(double p, const RoutePolicy& policy) noexcept;

// Scores one query record with the probe. The query must be in the probe's
// segment mode and width; the result is score_record on the same record.
Score score_query(const ProbeParams& params, SegmentMode mode, const HiddenStateRecord& query);

// Scores and decides, applying the policy's answer fraction.
RouteDecision route_query(const ProbeParams& params, const RoutePolicy& policy, SegmentMode mode,
                          const HiddenStateRecord& query);

// Request handling without a socket, shared by the HTTP server and tests.
// Responses are JSON text; status follows HTTP conventions.
struct ServiceReply {
    int status = 200;
    std::string body;
};

class RouterService {
public:
    // Parameters are immutable after construction.
    RouterService(ProbeParams params, RoutePolicy policy);

    ServiceReply health() const;
    ServiceReply score(std::string_view request_body) const;

    const ProbeParams& params() const noexcept { return params_; }
    const RoutePolicy& policy() const noexcept { return policy_; }
    const std::string& probe_version() const noexcept { return version_; }

private:
    ProbeParams params_;
    RoutePolicy policy_;
    std::string version_;
};

// HTTP front end: GET /health, POST /score.
class RouterServer {
public:
    explicit RouterServer(const RouterService& service);
    ~RouterServer();
    RouterServer(const RouterServer&) = delete;
    RouterServer& operator=(const RouterServer&) = delete;

    // Binds and returns the port (port 0 picks a free one).
    int bind(const std::string& host, int port);
    // Blocks until stop().
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Latencies in seconds. Answers of L tokens cost L * token time.
struct LatencyModel {
    double default_token_time = 0.02;
    double fallback_token_time = 0.08;
    double probe_time = 0.005;  // one probe evaluation; must not exceed default_token_time
    double fallback_accuracy = 0.9;

    void validate() const;
};

struct SimTrace {
    ScoredSet scored;                       // probe p and default-model correctness
    std::vector<std::size_t> answer_tokens; // answer length per item
};

struct StrategyStats {
    double mean_latency = 0.0;
    double accuracy = 0.0;
    std::size_t fallback_count = 0;
};

struct SimItem {
    Route route = Route::fallback;
    double always_default = 0.0;
    double post_hoc = 0.0;
    double parallel = 0.0;
    // Latency parallel routing adds over the cheapest path for the same
    // outcome: 0 on direct items, the probe time on fallback items.
    double parallel_added = 0.0;
};

struct SimReport {
    StrategyStats always_default;  // (a) never verify
    StrategyStats post_hoc;        // (b) generate, verify, then regenerate flagged items
    StrategyStats parallel;        // (c) score while generating, route before answering
    std::vector<SimItem> items;
    double max_added_direct = 0.0;
    double max_added_fallback = 0.0;
    bool bound_holds = false;  // added latency 0 on direct, <= one default token on fallback
};

SimReport simulate(const SimTrace& trace, const RoutePolicy& policy, const LatencyModel& model);

}  // namespace hsprobe
