#include "hsprobe/router.hpp"

#include "hsprobe/error.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace hsprobe {

using nlohmann::json;

void RoutePolicy::validate() const {
    require(tau >= 0.0 && tau <= 1.0, ErrorKind::invalid_argument,
            "route threshold tau must lie in [0, 1], got " + std::to_string(tau));
    require(answer_fraction > 0.0 && answer_fraction <= 1.0, ErrorKind::invalid_argument,
            "answer fraction must lie in (0, 1]");
}

std::string_view to_string(Route route) noexcept {
    return route == Route::answer_direct ? "ANSWER_DIRECT" : "FALLBACK";
}

RouteDecision decide(const Score& score, const RoutePolicy& policy) noexcept {
    RouteDecision d;
    d.score = score;
    // ties go to the default model
    d.route = score.p >= policy.tau ? Route::answer_direct : Route::fallback;
    return d;
}

RouteDecision decide(double p, const RoutePolicy& policy) noexcept {
    return decide(Score{p, std::log(p) - std::log1p(-p)}, policy);
}

Score score_query(const ProbeParams& params, SegmentMode mode, const HiddenStateRecord& query) {
    require(mode == params.mode, ErrorKind::mode_mismatch,
            "query mode " + std::string(to_string(mode)) + " does not match probe mode " +
                std::string(to_string(params.mode)));
    require(query.hidden_dim() == params.feature_dim(), ErrorKind::dimension_mismatch,
            "query hidden_dim " + std::to_string(query.hidden_dim()) + " does not match probe (" +
                std::to_string(params.feature_dim()) + ")");
    require(query.states.rows() == std::size_t{query.n_question} + query.n_answer, ErrorKind::shape_mismatch,
            "query has " + std::to_string(query.states.rows()) + " token rows but n_question + n_answer = " +
                std::to_string(std::size_t{query.n_question} + query.n_answer));
    for (float v : query.states.values()) {
        require(std::isfinite(v), ErrorKind::non_finite, "query '" + query.id + "' has a non-finite feature");
    }
    return score_record(params, query);
}

RouteDecision route_query(const ProbeParams& params, const RoutePolicy& policy, SegmentMode mode,
                          const HiddenStateRecord& query) {
    const auto start = std::chrono::steady_clock::now();
    Score s;
    if (policy.answer_fraction < 1.0 && mode == SegmentMode::question_and_answer) {
        s = score_query(params, mode, truncate_answer(query, policy.answer_fraction));
    } else {
        s = score_query(params, mode, query);
    }
    auto d = decide(s, policy);
    d.decision_time = std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - start);
    return d;
}

namespace {

bool client_error(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::invalid_argument:
    case ErrorKind::non_finite:
    case ErrorKind::dimension_mismatch:
    case ErrorKind::shape_mismatch:
    case ErrorKind::mode_mismatch:
        return true;
    default:
        return false;
    }
}

ServiceReply error_reply(int status, std::string_view kind, const std::string& message, const json& id) {
    json body = {{"error", {{"kind", kind}, {"message", message}}}};
    if (!id.is_null()) {
        body["id"] = id;
    }
    return {status, body.dump()};
}

template <class T>
T field(const json& j, const char* name) {
    require(j.contains(name), ErrorKind::invalid_argument, std::string("missing field '") + name + "'");
    try {
        return j.at(name).get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::invalid_argument, std::string("field '") + name + "' has the wrong type");
    }
}

HiddenStateRecord parse_query(const json& j, SegmentMode& mode) {
    HiddenStateRecord r;
    r.id = field<std::string>(j, "id");
    mode = parse_segment_mode(field<std::string>(j, "mode"));
    const auto dim = field<std::int64_t>(j, "hidden_dim");
    const auto nq = field<std::int64_t>(j, "n_question");
    const auto na = field<std::int64_t>(j, "n_answer");
    require(dim >= 1 && nq >= 0 && na >= 0 && nq <= UINT32_MAX && na <= UINT32_MAX, ErrorKind::invalid_argument,
            "hidden_dim must be >= 1 and token counts >= 0");
    require(j.contains("tokens") && j["tokens"].is_array(), ErrorKind::invalid_argument,
            "field 'tokens' must be an array");
    const auto& tokens = j["tokens"];
    const auto rows = static_cast<std::size_t>(nq + na);
    require(tokens.size() == rows * static_cast<std::size_t>(dim), ErrorKind::shape_mismatch,
            "tokens has " + std::to_string(tokens.size()) + " values, expected (n_question + n_answer) * hidden_dim = " +
                std::to_string(rows * static_cast<std::size_t>(dim)));
    std::vector<float> values;
    values.reserve(tokens.size());
    for (const auto& v : tokens) {
        require(v.is_number(), ErrorKind::invalid_argument, "tokens must hold numbers");
        values.push_back(static_cast<float>(v.get<double>()));
    }
    r.n_question = static_cast<std::uint32_t>(nq);
    r.n_answer = static_cast<std::uint32_t>(na);
    r.states = Matrix<float>(rows, static_cast<std::size_t>(dim), std::move(values));
    return r;
}

}  // namespace

RouterService::RouterService(ProbeParams params, RoutePolicy policy)
    : params_(std::move(params)), policy_(std::move(policy)), version_(probe_fingerprint(params_)) {
    policy_.validate();
    require(policy_.mode == params_.mode, ErrorKind::mode_mismatch,
            "policy mode " + std::string(to_string(policy_.mode)) + " differs from probe mode " +
                std::string(to_string(params_.mode)));
}

ServiceReply RouterService::health() const {
    const json body = {{"version", kToolkitVersion},
                       {"model_name", params_.model_name},
                       {"layer_index", params_.layer_index},
                       {"tau", policy_.tau}};
    return {200, body.dump()};
}

ServiceReply RouterService::score(std::string_view request_body) const {
    json req;
    try {
        req = json::parse(request_body);
    } catch (const json::parse_error& e) {
        return error_reply(400, "invalid_request", std::string("malformed JSON: ") + e.what(), nullptr);
    }
    if (!req.is_object()) {
        return error_reply(400, "invalid_request", "request body must be a JSON object", nullptr);
    }
    const json id = req.contains("id") ? req["id"] : json(nullptr);
    try {
        SegmentMode mode{};
        const auto query = parse_query(req, mode);
        const auto d = route_query(params_, policy_, mode, query);
        const json body = {{"id", query.id}, {"p", d.score.p}, {"route", to_string(d.route)}, {"probe_version", version_}};
        return {200, body.dump()};
    } catch (const Error& e) {
        return error_reply(client_error(e.kind()) ? 400 : 500, to_string(e.kind()), e.what(), id);
    } catch (const std::exception& e) {
        return error_reply(500, "internal", e.what(), id);
    }
}

struct RouterServer::Impl {
    const RouterService& service;
    httplib::Server server;
};

RouterServer::RouterServer(const RouterService& service) : impl_(new Impl{service, {}}) {
    auto& svc = impl_->service;
    impl_->server.Get("/health", [&svc](const httplib::Request&, httplib::Response& res) {
        const auto r = svc.health();
        res.status = r.status;
        res.set_content(r.body, "application/json");
    });
    impl_->server.Post("/score", [&svc](const httplib::Request& req, httplib::Response& res) {
        const auto r = svc.score(req.body);
        res.status = r.status;
        res.set_content(r.body, "application/json");
    });
}

RouterServer::~RouterServer() {
    stop();
}

int RouterServer::bind(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        bound = -1;
    }
    require(bound > 0, ErrorKind::io, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void RouterServer::listen() {
    impl_->server.listen_after_bind();
}

void RouterServer::stop() {
    impl_->server.stop();
}

void LatencyModel::validate() const {
    require(default_token_time > 0.0 && fallback_token_time > 0.0 && probe_time > 0.0, ErrorKind::invalid_argument,
            "latency model times must be > 0");
    require(probe_time <= default_token_time, ErrorKind::invalid_argument,
            "probe_time must not exceed one default-model token time");
    require(fallback_accuracy >= 0.0 && fallback_accuracy <= 1.0, ErrorKind::invalid_argument,
            "fallback accuracy must lie in [0, 1]");
}

SimReport simulate(const SimTrace& trace, const RoutePolicy& policy, const LatencyModel& model) {
    policy.validate();
    model.validate();
    const std::size_t n = trace.scored.size();
    require(n > 0, ErrorKind::invalid_argument, "simulation trace is empty");
    require(trace.scored.labels.size() == n && trace.answer_tokens.size() == n, ErrorKind::shape_mismatch,
            "trace scores, labels and answer lengths differ in size");

    const double td = model.default_token_time;
    const double tf = model.fallback_token_time;
    const double tp = model.probe_time;
    SimReport rep;
    rep.items.reserve(n);
    double sum_a = 0.0, sum_b = 0.0, sum_c = 0.0;
    double correct_a = 0.0, correct_routed = 0.0;
    std::size_t flagged = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = trace.scored.scores[i];
        require(std::isfinite(p), ErrorKind::non_finite, "trace score is not finite");
        require(trace.scored.labels[i] <= 1, ErrorKind::invalid_argument, "trace labels must be 0 or 1");
        const double len = static_cast<double>(trace.answer_tokens[i]);
        require(trace.answer_tokens[i] >= 1, ErrorKind::invalid_argument, "answer lengths must be >= 1");

        SimItem it;
        it.route = decide(p, policy).route;
        it.always_default = len * td;
        if (it.route == Route::answer_direct) {
            it.post_hoc = len * td + tp;
            it.parallel = len * td;
            it.parallel_added = it.parallel - it.always_default;
            correct_routed += trace.scored.labels[i];
            rep.max_added_direct = std::max(rep.max_added_direct, it.parallel_added);
        } else {
            // post-hoc pays the discarded default answer before retrying
            it.post_hoc = len * td + tp + len * tf;
            it.parallel = tp + len * tf;
            it.parallel_added = it.parallel - len * tf;
            correct_routed += model.fallback_accuracy;
            rep.max_added_fallback = std::max(rep.max_added_fallback, it.parallel_added);
            ++flagged;
        }
        correct_a += trace.scored.labels[i];
        sum_a += it.always_default;
        sum_b += it.post_hoc;
        sum_c += it.parallel;
        rep.items.push_back(it);
    }
    const double dn = static_cast<double>(n);
    rep.always_default = {sum_a / dn, correct_a / dn, 0};
    rep.post_hoc = {sum_b / dn, correct_routed / dn, flagged};
    rep.parallel = {sum_c / dn, correct_routed / dn, flagged};
    rep.bound_holds = rep.max_added_direct == 0.0 && rep.max_added_fallback <= td;
    return rep;
}

}  // namespace hsprobe
