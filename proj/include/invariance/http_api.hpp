#pragma once

// HTTP routes over an AnnotationStore.

#include <stdexcept>
#include <string>

// Eigen must come before httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen parameter names.
#include "invariance/annotation.hpp"
#include "invariance/error.hpp"

#include <httplib.h>
#include <json.hpp>

namespace invariance::annotation {

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound:
    case ErrorCode::UnknownImage:
    case ErrorCode::UnknownItem: return 404;
    case ErrorCode::StaleSession:
    case ErrorCode::DuplicateVote:
    case ErrorCode::NoVotes: return 409;
    case ErrorCode::BudgetExceeded: return 422;
    case ErrorCode::Io: return 500;
    default: return 400;
  }
}

namespace detail {

inline void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  send_json(res, {{"code", code}, {"message", message}}, status);
}

inline json parse_body(const httplib::Request& req) {
  try {
    return req.body.empty() ? json::object() : json::parse(req.body);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidParams, std::string("request body is not valid JSON: ") + e.what());
  }
}

/// Runs a handler, mapping library errors and malformed requests to JSON
/// error responses.
template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, http_status(e.code()), to_string(e.code()), e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, "InvalidParams", std::string("bad request field: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "Internal", e.what());
    }
  };
}

inline json example_json(const StoredExample& e) {
  auto j = invariance::to_json(e.entry);
  j["id"] = e.id;
  j["claimed_label"] = e.claimed_label;
  if (!e.session_id.empty()) j["session"] = e.session_id;
  return j;
}

inline json task_json(const LabelingTask& t) {
  json items = json::array();
  for (const auto& it : t.items) items.push_back(it.id);
  return {{"id", t.id}, {"items", items}, {"threshold", t.threshold}, {"seed", t.seed}, {"votes", t.votes.size()}};
}

}  // namespace detail

/// Registers every endpoint of the annotation API on `server`.
inline void register_routes(httplib::Server& server, AnnotationStore& store) {
  using detail::guarded;
  using detail::send_json;
  using httplib::Request;
  using httplib::Response;

  server.Get("/health", guarded([](const Request&, Response& res) { send_json(res, {{"status", "ok"}}); }));

  server.Post("/sessions", guarded([&store](const Request& req, Response& res) {
                const auto body = detail::parse_body(req);
                const auto s = store.create_session(body.at("base_index").get<std::size_t>(),
                                                    parse_attack_norm(body.at("norm").get<std::string>()),
                                                    body.at("epsilon").get<double>());
                send_json(res, to_json(s), 201);
              }));

  server.Get(R"(/sessions/([^/]+))", guarded([&store](const Request& req, Response& res) {
               send_json(res, to_json(store.get_session(req.matches[1])));
             }));

  server.Post(R"(/sessions/([^/]+)/edits)", guarded([&store](const Request& req, Response& res) {
                const auto body = detail::parse_body(req);
                std::vector<std::pair<std::size_t, double>> edits;
                for (const auto& e : body.at("edits")) {
                  std::size_t pixel;
                  if (e.contains("pixel")) {
                    pixel = e.at("pixel").get<std::size_t>();
                  } else {
                    const auto s = store.get_session(req.matches[1]);
                    const int row = e.at("row").get<int>(), col = e.at("col").get<int>();
                    if (row < 0 || col < 0 || row >= s.base.height || col >= s.base.width)
                      fail(ErrorCode::InvalidParams, "row/col outside the image");
                    pixel = static_cast<std::size_t>(row) * static_cast<std::size_t>(s.base.width) +
                            static_cast<std::size_t>(col);
                  }
                  edits.emplace_back(pixel, e.at("value").get<double>());
                }
                std::optional<std::uint64_t> version;
                if (body.contains("version")) version = body["version"].get<std::uint64_t>();
                const auto [s, budget] = store.apply_edit(req.matches[1], edits, version);
                auto j = to_json(s);
                j["budget"] = to_json(budget);
                send_json(res, j);
              }));

  server.Post(R"(/sessions/([^/]+)/save)", guarded([&store](const Request& req, Response& res) {
                const auto body = detail::parse_body(req);
                std::optional<std::uint64_t> version;
                if (body.contains("version")) version = body["version"].get<std::uint64_t>();
                const auto ex = store.save_example(req.matches[1], body.at("claimed_label").get<int>(), version);
                send_json(res, detail::example_json(ex), 201);
              }));

  server.Get(R"(/images/(\d+))", guarded([&store](const Request& req, Response& res) {
               std::size_t idx = store.images().size();
               try {
                 idx = std::stoull(req.matches[1]);
               } catch (const std::out_of_range&) {
               }
               if (idx >= store.images().size()) fail(ErrorCode::UnknownImage, "no image at index " + req.matches[1].str());
               const auto& ex = store.images()[idx];
               auto j = image_json(ex.image);
               j["index"] = idx;
               j["label"] = ex.label;
               send_json(res, j);
             }));

  server.Post("/tasks", guarded([&store](const Request& req, Response& res) {
                const auto body = detail::parse_body(req);
                const auto t = store.create_task(body.value("items", std::vector<std::string>{}),
                                                 body.value("clean", std::vector<std::size_t>{}),
                                                 body.value("seed", std::uint64_t{0}),
                                                 body.value("threshold", kDefaultThreshold));
                send_json(res, detail::task_json(t), 201);
              }));

  server.Get(R"(/tasks/([^/]+)/next)", guarded([&store](const Request& req, Response& res) {
               const auto rater = req.get_param_value("rater");
               if (rater.empty()) fail(ErrorCode::InvalidParams, "rater query parameter is required");
               const auto t = store.get_task(req.matches[1]);
               const auto item = store.next_item(req.matches[1], rater);
               std::size_t voted = 0;
               for (const auto& v : t.votes) voted += v.rater == rater;
               json j = {{"task", t.id}, {"rater", rater}, {"done", !item}, {"progress", voted},
                         {"total", t.items.size()}};
               if (item)
                 j["item"] = {{"id", item->id}, {"width", item->width}, {"height", item->height},
                              {"pixels", item->pixels}};
               send_json(res, j);
             }));

  server.Post(R"(/tasks/([^/]+)/votes)", guarded([&store](const Request& req, Response& res) {
                const auto body = detail::parse_body(req);
                const auto t = store.get_task(req.matches[1]);
                const int label = parse_vote_label(body.at("label"), t.num_categories);
                store.submit_vote(req.matches[1], body.at("rater").get<std::string>(),
                                  body.at("item").get<std::string>(), label);
                send_json(res, {{"ok", true}}, 201);
              }));

  server.Get(R"(/tasks/([^/]+)/report)", guarded([&store](const Request& req, Response& res) {
               send_json(res, to_json(store.report(req.matches[1])));
             }));

  server.Get("/gallery", guarded([&store](const Request&, Response& res) {
               json arr = json::array();
               for (const auto& e : store.gallery()) arr.push_back(detail::example_json(e));
               send_json(res, arr);
             }));

  server.set_error_handler([](const Request&, Response& res) {
    if (res.body.empty()) detail::send_error(res, res.status, "NotFound", "no such route");
  });
}

}  // namespace invariance::annotation
