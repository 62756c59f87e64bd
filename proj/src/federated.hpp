#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "model.hpp"
#include "rng.hpp"

namespace fedgen {

enum class FedStrategy { kFedAvg, kFedProx, kFedDrop };

const char* fed_strategy_name(FedStrategy s);
FedStrategy fed_strategy_from_name(const std::string& name);

struct FedConfig {
  FedStrategy strategy = FedStrategy::kFedAvg;
  std::size_t local_epochs = 1;
  std::size_t total_rounds = 1;
  double mu = 0.01;            // FedProx proximal coefficient
  double drop_fraction = 0.0;  // FedDrop
  TrainConfig train;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  // Literal per-sample scaling of the private update (off by default;
  // plain local SGD is the identity-aggregation behavior).
  bool private_update_scaling = false;
};

void validate_fed_config(const FedConfig& cfg);

// One simulated speaker-device.
struct ClientState {
  SpeakerId client_id = 0;
  std::vector<DialoguePair> train_data;  // all with speaker == client_id
  std::vector<DialoguePair> dev_data;
  Seq2SeqModel model;
  std::size_t sample_count = 0;  // |train_data|
};

// The server holds only the FEDERATED subset; a private tensor here is a
// privacy violation and is rejected structurally.
struct ServerState {
  ParamSet federated;
  std::size_t round_index = 0;
};

ServerState make_server(ParamSet federated);

// Delta over FEDERATED tensor names only.
struct ClientUpdate {
  SpeakerId client_id = 0;
  std::size_t sample_count = 0;
  std::map<std::string, Matrix> delta;
};

// Wire format the privacy audit reads: client id, sample count, then
// (name, shape, values) per tensor.
std::vector<std::byte> serialize_update(const ClientUpdate& update);
ClientUpdate parse_update(const std::vector<std::byte>& bytes);

struct ClientData {
  SpeakerId client_id = 0;
  std::vector<DialoguePair> train;
  std::vector<DialoguePair> dev;
};

// Each client copies the federated tensors and freshly initializes its
// own persona row (normal(0, 0.1), seeded per client).
std::vector<ClientState> init_clients(const ParamSet& pretrained_federated,
                                      const ModelConfig& cfg,
                                      const std::vector<ClientData>& data,
                                      std::uint64_t persona_init_seed);

struct LocalTrainResult {
  ClientUpdate update;
  double train_nll = 0.0;  // mean per-token NLL of the last local epoch
};

// E local epochs against the client's own pairs; FedProx adds the
// proximal gradient mu * (v_f - anchor) over federated tensors per batch.
// Returns the federated-only delta; the persona row is updated in place
// and never enters the update.
LocalTrainResult local_train(ClientState& client, const FedConfig& cfg,
                             const ParamSet& anchor, std::size_t round,
                             std::size_t total_samples);

// w^{t+1} = w^t + sum_i c_i d_i / sum_i c_i, per tensor; updates are
// applied in client-id order so the result is permutation-invariant.
ParamSet aggregate_fedavg(const ServerState& server,
                          const std::vector<ClientUpdate>& updates);

// Keeps ceil((1 - drop_fraction) * n) updates sampled without
// replacement from the round RNG, then averages the survivors.
// The surviving client ids are reported through `participants`.
ParamSet aggregate_feddrop(const ServerState& server,
                           const std::vector<ClientUpdate>& updates,
                           double drop_fraction, Rng& round_rng,
                           std::vector<SpeakerId>* participants = nullptr);

struct RoundClientMetrics {
  SpeakerId client_id = 0;
  double delta_l2 = 0.0;
  double train_nll = 0.0;  // mean per-token NLL of the last local epoch
  double dev_ppl = 0.0;    // new federated params + own persona
};

struct RoundRecord {
  std::size_t round = 0;
  FedStrategy strategy = FedStrategy::kFedAvg;
  std::vector<SpeakerId> participants;  // contributors to the aggregate
  std::vector<RoundClientMetrics> per_client;
  double aggregate_delta_l2 = 0.0;
  std::int64_t wallclock_ms = 0;
};

struct SimulationHooks {
  std::function<void(const RoundRecord&)> on_round;
  // Raw bytes of every serialized client update (privacy audits).
  std::function<void(std::size_t round, const std::vector<std::byte>&)>
      on_update_bytes;
};

// One synchronous round: broadcast w^t, train every client locally,
// round-trip each update through the wire format, aggregate, advance.
// Clients see w^{t+1} only at the next round's broadcast.
RoundRecord run_round(ServerState& server, std::vector<ClientState>& clients,
                      const FedConfig& cfg, const SimulationHooks& hooks = {});

struct SimulationResult {
  ParamSet server_federated;
  std::vector<RoundRecord> rounds;
};

// init_clients + total_rounds x run_round. `clients` is an out-param so
// callers can persist the private persona tensors afterwards.
SimulationResult run_simulation(const ParamSet& pretrained_federated,
                                const ModelConfig& cfg,
                                const std::vector<ClientData>& data,
                                const FedConfig& fed_cfg,
                                std::vector<ClientState>& clients,
                                const SimulationHooks& hooks = {});

}  // namespace fedgen
