#include "federated.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>

#include "common.hpp"
#include "metrics.hpp"

namespace fedgen {

const char* fed_strategy_name(FedStrategy s) {
  switch (s) {
    case FedStrategy::kFedAvg:
      return "fedavg";
    case FedStrategy::kFedProx:
      return "fedprox";
    case FedStrategy::kFedDrop:
      return "feddrop";
  }
  return "unknown";
}

FedStrategy fed_strategy_from_name(const std::string& name) {
  if (name == "fedavg") return FedStrategy::kFedAvg;
  if (name == "fedprox") return FedStrategy::kFedProx;
  if (name == "feddrop") return FedStrategy::kFedDrop;
  fail(ErrorCode::kConfig, "unknown federated strategy '" + name + "'");
}

void validate_fed_config(const FedConfig& cfg) {
  if (cfg.local_epochs == 0) {
    fail(ErrorCode::kConfig, "local_epochs must be >= 1");
  }
  if (cfg.mu < 0.0) {
    fail(ErrorCode::kConfig, "mu must be >= 0");
  }
  if (cfg.drop_fraction < 0.0 || cfg.drop_fraction >= 1.0) {
    fail(ErrorCode::kConfig, "drop_fraction must be in [0, 1)");
  }
  if (cfg.workers == 0) {
    fail(ErrorCode::kConfig, "workers must be >= 1");
  }
}

ServerState make_server(ParamSet federated) {
  for (const auto& [name, t] : federated.tensors()) {
    if (t.tag == ParamTag::kPrivate) {
      fail(ErrorCode::kSchema,
           "server state may not hold private tensor '" + name + "'");
    }
  }
  return ServerState{std::move(federated), 0};
}

namespace {

constexpr char kUpdateMagic[4] = {'F', 'G', 'U', 'P'};

void append_u64(std::vector<std::byte>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
  }
}

void append_f64(std::vector<std::byte>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  append_u64(out, bits);
}

void append_string(std::vector<std::byte>& out, const std::string& s) {
  append_u64(out, s.size());
  for (char c : s) out.push_back(static_cast<std::byte>(c));
}

struct ByteReader {
  const std::vector<std::byte>& bytes;
  std::size_t pos = 0;

  std::uint64_t u64() {
    if (pos + 8 > bytes.size()) {
      fail(ErrorCode::kFormat, "truncated client update");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(
               bytes[pos + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos += 8;
    return v;
  }

  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string str() {
    std::uint64_t n = u64();
    if (pos + n > bytes.size()) {
      fail(ErrorCode::kFormat, "truncated client update");
    }
    std::string s;
    s.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      s.push_back(static_cast<char>(std::to_integer<std::uint8_t>(bytes[pos + i])));
    }
    pos += n;
    return s;
  }
};

}  // namespace

std::vector<std::byte> serialize_update(const ClientUpdate& update) {
  std::vector<std::byte> out;
  for (char c : kUpdateMagic) out.push_back(static_cast<std::byte>(c));
  append_u64(out, static_cast<std::uint64_t>(update.client_id));
  append_u64(out, update.sample_count);
  append_u64(out, update.delta.size());
  for (const auto& [name, m] : update.delta) {
    append_string(out, name);
    append_u64(out, m.rows);
    append_u64(out, m.cols);
    for (double v : m.data) append_f64(out, v);
  }
  return out;
}

ClientUpdate parse_update(const std::vector<std::byte>& bytes) {
  if (bytes.size() < 4 ||
      std::memcmp(bytes.data(), kUpdateMagic, 4) != 0) {
    fail(ErrorCode::kFormat, "not a client update");
  }
  ByteReader reader{bytes, 4};
  ClientUpdate update;
  update.client_id = static_cast<SpeakerId>(reader.u64());
  update.sample_count = reader.u64();
  std::uint64_t count = reader.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = reader.str();
    std::uint64_t rows = reader.u64();
    std::uint64_t cols = reader.u64();
    Matrix m(rows, cols);
    for (double& v : m.data) v = reader.f64();
    update.delta.emplace(std::move(name), std::move(m));
  }
  return update;
}

std::vector<ClientState> init_clients(const ParamSet& pretrained_federated,
                                      const ModelConfig& cfg,
                                      const std::vector<ClientData>& data,
                                      std::uint64_t persona_init_seed) {
  if (data.empty()) {
    fail(ErrorCode::kConfig, "init_clients: no clients");
  }
  std::vector<ClientState> clients;
  clients.reserve(data.size());
  for (const ClientData& cd : data) {
    if (cd.train.empty()) {
      fail(ErrorCode::kConfig,
           "client " + std::to_string(cd.client_id) +
               " has no training pairs; every client must have data");
    }
    for (const DialoguePair& p : cd.train) {
      if (p.speaker != cd.client_id) {
        fail(ErrorCode::kConfig,
             "client " + std::to_string(cd.client_id) +
                 " holds a pair for speaker " + std::to_string(p.speaker));
      }
    }

    ParamSet params;
    for (const auto& [name, t] : pretrained_federated.tensors()) {
      if (t.tag == ParamTag::kPrivate) continue;  // clients own their table
      params.add(name, t.value, t.tag);
    }
    if (cfg.persona_enabled) {
      Matrix table(cfg.num_speakers, cfg.persona_dim, 0.0);
      Matrix row =
          normal_init(1, cfg.persona_dim, 0.0, 0.1,
                      derive_seed(persona_init_seed,
                                  static_cast<std::uint64_t>(cd.client_id)));
      std::copy(row.data.begin(), row.data.end(),
                table.data.begin() +
                    static_cast<std::ptrdiff_t>(
                        static_cast<std::size_t>(cd.client_id) *
                        cfg.persona_dim));
      params.add(persona_table_name(), std::move(table), ParamTag::kPrivate);
    }

    ClientState client{cd.client_id, cd.train, cd.dev,
                       Seq2SeqModel(cfg, std::move(params)), cd.train.size()};
    clients.push_back(std::move(client));
  }
  return clients;
}

LocalTrainResult local_train(ClientState& client, const FedConfig& cfg,
                             const ParamSet& anchor, std::size_t round,
                             std::size_t total_samples) {
  validate_fed_config(cfg);
  ParamSet client_federated = client.model.params().subset(ParamTag::kFederated);
  if (!partition_compatible(client_federated, anchor)) {
    fail(ErrorCode::kSchema,
         "local_train: client parameters do not match the server schema");
  }

  Matrix persona_before;
  if (cfg.private_update_scaling && client.model.persona_table() != nullptr) {
    persona_before = client.model.persona_table()->value;
  }

  BatchGradHook hook;
  if (cfg.strategy == FedStrategy::kFedProx && cfg.mu != 0.0) {
    const ParamSet* anchor_ptr = &anchor;
    double mu = cfg.mu;
    hook = [anchor_ptr, mu](ParamSet& params) {
      for (auto& [name, t] : params.tensors()) {
        if (t.tag != ParamTag::kFederated) continue;
        const Matrix& a = anchor_ptr->at(name).value;
        for (std::size_t i = 0; i < t.grad.size(); ++i) {
          t.grad.data[i] += mu * (t.value.data[i] - a.data[i]);
        }
      }
    };
  }

  double last_epoch_nll = 0.0;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    std::uint64_t epoch_seed =
        derive_seed(cfg.seed, round, static_cast<std::uint64_t>(client.client_id),
                    e);
    last_epoch_nll =
        train_epoch(client.model, client.train_data, cfg.train, epoch_seed, hook);
  }

  // Literal sample-share scaling of the private update (compat mode).
  if (cfg.private_update_scaling && client.model.persona_table() != nullptr &&
      total_samples > 0) {
    double share = static_cast<double>(client.sample_count) /
                   static_cast<double>(total_samples);
    Matrix& table = client.model.persona_table()->value;
    for (std::size_t i = 0; i < table.size(); ++i) {
      table.data[i] =
          persona_before.data[i] +
          share * (table.data[i] - persona_before.data[i]);
    }
    client.model.mark_params_changed();
  }

  LocalTrainResult result;
  result.train_nll = last_epoch_nll;
  result.update.client_id = client.client_id;
  result.update.sample_count = client.sample_count;
  // The private persona row stays in client.model; the delta holds
  // federated names only by construction.
  for (const auto& [name, t] : client.model.params().tensors()) {
    if (t.tag != ParamTag::kFederated) continue;
    result.update.delta.emplace(name, sub(t.value, anchor.at(name).value));
  }
  return result;
}

namespace {

void check_update_schema(const ServerState& server,
                         const ClientUpdate& update) {
  if (update.delta.size() != server.federated.size()) {
    fail(ErrorCode::kSchema,
         "client update key set does not match the federated schema");
  }
  for (const auto& [name, m] : update.delta) {
    if (!server.federated.contains(name)) {
      fail(ErrorCode::kSchema,
           "client update carries unknown tensor '" + name + "'");
    }
    if (!server.federated.at(name).value.same_shape(m)) {
      fail(ErrorCode::kSchema,
           "client update tensor '" + name + "' has the wrong shape");
    }
  }
}

}  // namespace

ParamSet aggregate_fedavg(const ServerState& server,
                          const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) {
    fail(ErrorCode::kAggregation, "aggregate: no client updates");
  }
  std::vector<const ClientUpdate*> ordered;
  ordered.reserve(updates.size());
  double total_weight = 0.0;
  for (const ClientUpdate& u : updates) {
    check_update_schema(server, u);
    ordered.push_back(&u);
    total_weight += static_cast<double>(u.sample_count);
  }
  if (total_weight <= 0.0) {
    fail(ErrorCode::kAggregation, "aggregate: zero total sample count");
  }
  // Client-id order fixes the floating-point reduction order, making the
  // result independent of arrival order.
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) {
              return a->client_id < b->client_id;
            });

  ParamSet next;
  for (const auto& [name, t] : server.federated.tensors()) {
    Matrix acc(t.value.rows, t.value.cols, 0.0);
    for (const ClientUpdate* u : ordered) {
      axpy(acc, static_cast<double>(u->sample_count), u->delta.at(name));
    }
    scale_in_place(acc, 1.0 / total_weight);
    add_in_place(acc, t.value);
    next.add(name, std::move(acc), t.tag);
  }
  return next;
}

ParamSet aggregate_feddrop(const ServerState& server,
                           const std::vector<ClientUpdate>& updates,
                           double drop_fraction, Rng& round_rng,
                           std::vector<SpeakerId>* participants) {
  if (updates.empty()) {
    fail(ErrorCode::kAggregation, "aggregate: no client updates");
  }
  if (drop_fraction < 0.0 || drop_fraction >= 1.0) {
    fail(ErrorCode::kInvalidArgument, "drop_fraction must be in [0, 1)");
  }
  std::size_t n = updates.size();
  std::size_t keep = static_cast<std::size_t>(
      std::ceil((1.0 - drop_fraction) * static_cast<double>(n)));
  if (keep == 0) {
    fail(ErrorCode::kAggregation, "feddrop: every client was dropped");
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  round_rng.shuffle(order);
  order.resize(keep);

  std::vector<ClientUpdate> survivors;
  survivors.reserve(keep);
  for (std::size_t i : order) survivors.push_back(updates[i]);
  if (participants != nullptr) {
    participants->clear();
    for (const ClientUpdate& u : survivors) {
      participants->push_back(u.client_id);
    }
    std::sort(participants->begin(), participants->end());
  }
  return aggregate_fedavg(server, survivors);
}

RoundRecord run_round(ServerState& server, std::vector<ClientState>& clients,
                      const FedConfig& cfg, const SimulationHooks& hooks) {
  validate_fed_config(cfg);
  if (clients.empty()) {
    fail(ErrorCode::kAggregation, "run_round: no clients");
  }
  auto start = std::chrono::steady_clock::now();
  std::size_t round = server.round_index;

  // Broadcast w^t.
  for (ClientState& client : clients) {
    client.model.load_values(server.federated);
  }

  std::size_t total_samples = 0;
  for (const ClientState& client : clients) {
    total_samples += client.sample_count;
  }

  // Local training, optionally fanned out over a worker pool. Clients
  // are independent; results land in per-client slots so the worker
  // count never affects the outcome.
  std::vector<ClientUpdate> raw_updates(clients.size());
  std::vector<double> train_nlls(clients.size(), 0.0);
  auto train_one = [&](std::size_t i) {
    LocalTrainResult r =
        local_train(clients[i], cfg, server.federated, round, total_samples);
    raw_updates[i] = std::move(r.update);
    train_nlls[i] = r.train_nll;
  };
  if (cfg.workers <= 1 || clients.size() <= 1) {
    for (std::size_t i = 0; i < clients.size(); ++i) train_one(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t n_threads = std::min(cfg.workers, clients.size());
    std::atomic<std::size_t> next_index{0};
    std::vector<std::exception_ptr> errors(n_threads);
    for (std::size_t w = 0; w < n_threads; ++w) {
      pool.emplace_back([&, w]() {
        try {
          while (true) {
            std::size_t i = next_index.fetch_add(1);
            if (i >= clients.size()) break;
            train_one(i);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Round-trip every update through the wire format so the privacy
  // property is enforced on actual bytes.
  std::vector<ClientUpdate> updates;
  updates.reserve(raw_updates.size());
  for (const ClientUpdate& u : raw_updates) {
    std::vector<std::byte> bytes = serialize_update(u);
    if (hooks.on_update_bytes) {
      hooks.on_update_bytes(round, bytes);
    }
    updates.push_back(parse_update(bytes));
  }

  RoundRecord record;
  record.round = round;
  record.strategy = cfg.strategy;

  ParamSet next;
  if (cfg.strategy == FedStrategy::kFedDrop) {
    Rng drop_rng(derive_seed(cfg.seed, 0x64726f70ULL, round));
    next = aggregate_feddrop(server, updates, cfg.drop_fraction, drop_rng,
                             &record.participants);
  } else {
    next = aggregate_fedavg(server, updates);
    for (const ClientUpdate& u : updates) {
      record.participants.push_back(u.client_id);
    }
    std::sort(record.participants.begin(), record.participants.end());
  }

  double agg_sq = 0.0;
  for (const auto& [name, t] : next.tensors()) {
    const Matrix& prev = server.federated.at(name).value;
    for (std::size_t i = 0; i < t.value.size(); ++i) {
      double d = t.value.data[i] - prev.data[i];
      agg_sq += d * d;
    }
  }
  record.aggregate_delta_l2 = std::sqrt(agg_sq);

  server.federated = std::move(next);
  server.round_index = round + 1;

  // Per-client metrics; dev perplexity uses the new federated parameters
  // combined with the client's own persona, on a scratch copy so clients
  // only see w^{t+1} at the next broadcast.
  for (std::size_t i = 0; i < clients.size(); ++i) {
    RoundClientMetrics m;
    m.client_id = clients[i].client_id;
    double sq = 0.0;
    for (const auto& [name, d] : raw_updates[i].delta) {
      for (double v : d.data) sq += v * v;
    }
    m.delta_l2 = std::sqrt(sq);
    m.train_nll = train_nlls[i];
    if (!clients[i].dev_data.empty()) {
      Seq2SeqModel snapshot = clients[i].model;
      snapshot.load_values(server.federated);
      m.dev_ppl = perplexity(snapshot, clients[i].dev_data);
    }
    record.per_client.push_back(m);
  }

  auto end = std::chrono::steady_clock::now();
  record.wallclock_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(end - start)
          .count();

  if (hooks.on_round) {
    hooks.on_round(record);
  }
  return record;
}

SimulationResult run_simulation(const ParamSet& pretrained_federated,
                                const ModelConfig& cfg,
                                const std::vector<ClientData>& data,
                                const FedConfig& fed_cfg,
                                std::vector<ClientState>& clients,
                                const SimulationHooks& hooks) {
  validate_fed_config(fed_cfg);
  ServerState server = make_server([&] {
    ParamSet fed;
    for (const auto& [name, t] : pretrained_federated.tensors()) {
      if (t.tag == ParamTag::kPrivate) continue;
      fed.add(name, t.value, t.tag);
    }
    return fed;
  }());

  clients = init_clients(server.federated, cfg, data,
                         derive_seed(fed_cfg.seed, 0x70657273ULL));

  SimulationResult result;
  result.rounds.reserve(fed_cfg.total_rounds);
  for (std::size_t r = 0; r < fed_cfg.total_rounds; ++r) {
    result.rounds.push_back(run_round(server, clients, fed_cfg, hooks));
  }
  result.server_federated = std::move(server.federated);
  return result;
}

}  // namespace fedgen
