// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "polymlm/tensor_parallel.hpp"

using namespace polymlm;
using namespace std::chrono_literals;

namespace {

ModelConfig tiny_tp() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 4;
  c.vocab = 64;
  c.max_seq = 16;
  c.dropout = 0.0;
  return c;
}

Tensor random_tensor(Shape s, std::uint64_t seed) {
  Tensor t(std::move(s));
  Rng rng(seed);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

MlmBatch random_batch(const ModelConfig& c, std::size_t B, std::size_t T, std::uint64_t seed, double rate = 0.3) {
  MlmBatch b;
  b.batch = B;
  b.seq = T;
  Rng rng(seed);
  b.input_ids.resize(B * T);
  b.target_ids.assign(B * T, kIgnoreIndex);
  for (std::size_t i = 0; i < B * T; ++i) {
    b.input_ids[i] = static_cast<std::int64_t>(kNumSpecials + rng.below(c.vocab - kNumSpecials));
    if (i == 0 || rng.uniform() < rate) {
      b.target_ids[i] = b.input_ids[i];
      b.input_ids[i] = SpecialIds{}.mask;
    }
  }
  return b;
}

double serial_loss_and_grads(const ModelConfig& c, ParamStore& p, const MlmBatch& b) {
  p.zero_grad();
  Tape t;
  Var loss = mlm_loss(t, c, p, b);
  t.backward(loss);
  return loss.value().item();
}

}  // namespace

TEST(Communicator, ReductionsAreRankOrderedAndIdentical) {
  auto out = run_ranks(4, [](Communicator& c) {
    std::vector<double> v{1e16 * (c.rank() == 0 ? 1 : 0), 1.0, static_cast<double>(c.rank()), -1e16 * (c.rank() == 3)};
    c.all_reduce_sum(v);
    std::vector<double> m{static_cast<double>(c.rank()) * -1.0, static_cast<double>(c.rank())};
    c.all_reduce_max(m);
    v.insert(v.end(), m.begin(), m.end());
    return v;
  });
  for (const auto& v : out) EXPECT_EQ(v, out[0]);
  EXPECT_EQ(out[0][0], 1e16);
  EXPECT_EQ(out[0][1], 4.0);
  EXPECT_EQ(out[0][2], 6.0);
  EXPECT_EQ(out[0][3], -1e16);
  EXPECT_EQ(out[0][4], 0.0);
  EXPECT_EQ(out[0][5], 3.0);
}

TEST(Communicator, GatherBroadcastAndWorldOfOne) {
  auto out = run_ranks(3, [](Communicator& c) {
    std::vector<double> mine(c.rank() + 1, static_cast<double>(c.rank()));
    auto g = c.all_gather(mine);
    std::vector<double> b{c.rank() == 2 ? 7.0 : 0.0, c.rank() == 2 ? 8.0 : 0.0};
    c.broadcast(b, 2);
    c.barrier();
    g.insert(g.end(), b.begin(), b.end());
    return g;
  });
  const std::vector<double> expect{0, 1, 1, 2, 2, 2, 7, 8};
  for (const auto& v : out) EXPECT_EQ(v, expect);

  auto single = run_ranks(1, [](Communicator& c) {
    std::vector<double> v{3.0};
    c.all_reduce_sum(v);
    c.barrier();
    return std::make_pair(v[0], c.counters().bytes);
  });
  EXPECT_EQ(single[0].first, 3.0);
  EXPECT_EQ(single[0].second, 0u);
}

TEST(Communicator, MismatchNamesRankAndSequence) {
  try {
    run_ranks(3, [](Communicator& c) {
      std::vector<double> v(4, 1.0);
      c.all_reduce_sum(v);
      if (c.rank() == 2) {
        (void)c.all_gather(v);
      } else {
        c.all_reduce_sum(v);
      }
    });
    FAIL() << "expected a protocol error";
  } catch (const ProtocolError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("rank 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("sequence 1"), std::string::npos) << msg;
  }
}

TEST(Communicator, SizeMismatchIsDetected) {
  EXPECT_THROW(run_ranks(2,
                         [](Communicator& c) {
                           std::vector<double> v(c.rank() + 1, 1.0);
                           c.all_reduce_sum(v);
                         }),
               ProtocolError);
}

TEST(Communicator, MissingCollectiveTimesOut) {
  const auto start = std::chrono::steady_clock::now();
  try {
    run_ranks(
        2,
        [](Communicator& c) {
          std::vector<double> v(2, 1.0);
          if (c.rank() == 0) c.all_reduce_sum(v);
        },
        200ms);
    FAIL() << "expected a protocol error";
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("timeout"), std::string::npos) << e.what();
  }
  EXPECT_LT(std::chrono::steady_clock::now() - start, 5s);
}

TEST(Communicator, RankFailureReleasesOthers) {
  EXPECT_THROW(run_ranks(3,
                         [](Communicator& c) {
                           if (c.rank() == 1) throw DataError("boom");
                           std::vector<double> v(2, 1.0);
                           c.all_reduce_sum(v);
                         }),
               DataError);
}

TEST(ShardPlan, PartitionsAndErrors) {
  EXPECT_EQ(partition_range(6, 3, 0), (Range{0, 2}));
  EXPECT_EQ(partition_range(6, 3, 1), (Range{2, 4}));
  EXPECT_EQ(partition_range(6, 3, 2), (Range{4, 6}));
  std::size_t covered = 0;
  for (std::size_t r = 0; r < 7; ++r) {
    const Range rg = partition_range(250000, 7, r);
    EXPECT_EQ(rg.begin, covered);
    covered = rg.end;
  }
  EXPECT_EQ(covered, 250000u);
  ModelConfig c = tiny_tp();
  EXPECT_THROW(make_shard_plan(c, 3), PlanError);
  c.heads = 8;
  EXPECT_NO_THROW(make_shard_plan(c, 8));
}

TEST(ParallelLinear, ColumnMatchesSerial) {
  const Tensor x = random_tensor({4, 8}, 1), w = random_tensor({8, 6}, 2), b = random_tensor({6}, 3);
  Tape st;
  const Tensor serial = add_bias(matmul(st.constant(x), st.constant(w)), st.constant(b)).value();
  for (std::size_t ws : {1u, 2u, 3u}) {
    auto outs = run_ranks(ws, [&](Communicator& c) {
      const ShardSpec spec{ShardKind::kColumns, ShardDim::kHidden};
      ShardPlan plan{ws, 6, ws, ws, 6};
      Tape t;
      Tensor wl = slice_for_rank(w, spec, plan, c.rank());
      Tensor bl = slice_for_rank(b, {ShardKind::kRows, ShardDim::kHidden}, plan, c.rank());
      EXPECT_EQ(wl.dim(1), 6 / ws);
      return column_parallel_linear(t.constant(x), t.constant(wl), t.constant(bl), c, 6).value();
    });
    std::vector<const Tensor*> parts;
    for (const auto& o : outs) parts.push_back(&o);
    ShardPlan plan{ws, 6, ws, ws, 6};
    const Tensor gathered = merge_slices(parts, {ShardKind::kColumns, ShardDim::kHidden}, plan);
    EXPECT_EQ(gathered, serial) << "world size " << ws;
  }
}

TEST(ParallelLinear, RowMatchesSerial) {
  const Tensor x = random_tensor({5, 8}, 4), w = random_tensor({8, 3}, 5), b = random_tensor({3}, 6);
  Tape st;
  const Tensor serial = add_bias(matmul(st.constant(x), st.constant(w)), st.constant(b)).value();
  for (std::size_t ws : {1u, 2u, 4u}) {
    for (bool zero : {false, true}) {
      auto outs = run_ranks(ws, [&](Communicator& c) {
        ShardPlan plan{ws, 8, ws, ws, 8};
        Tensor xs = slice_for_rank(x, {ShardKind::kColumns, ShardDim::kHidden}, plan, c.rank());
        if (zero) xs = Tensor(xs.shape(), 0.0);
        Tensor wl = slice_for_rank(w, {ShardKind::kRows, ShardDim::kHidden}, plan, c.rank());
        Tape t;
        Var bv = t.constant(b);
        return row_parallel_linear(t.constant(xs), t.constant(wl), c.rank() == 0 ? &bv : nullptr, c, 8).value();
      });
      for (const auto& o : outs) {
        EXPECT_EQ(o, outs[0]);
        for (std::size_t i = 0; i < o.numel(); ++i) {
          if (zero) {
            EXPECT_EQ(o[i], b[i % 3]);
          } else {
            EXPECT_NEAR(o[i], serial[i], 1e-12);
          }
        }
      }
      if (ws == 1 && !zero) {
        EXPECT_EQ(outs[0], serial);
      }
    }
  }
}

TEST(ParallelLinear, PlanMismatch) {
  EXPECT_THROW(run_ranks(2,
                         [](Communicator& c) {
                           Tape t;
                           Var x = t.constant(Tensor({2, 4}, 1.0));
                           (void)column_parallel_linear(x, t.constant(Tensor({4, 4}, 1.0)),
                                                        t.constant(Tensor({4}, 0.0)), c, 6);
                         }),
               PlanError);
}

TEST(Sharding, MergeReconstructsBitwise) {
  ModelConfig c = tiny_tp();
  c.vocab = 67;
  c.heads = 8;
  const ParamStore full = init_params(c, 5);
  for (std::size_t ws : {1u, 2u, 4u, 8u}) {
    const ShardPlan plan = make_shard_plan(c, ws);
    std::vector<ParamStore> shards;
    for (std::size_t r = 0; r < ws; ++r) shards.push_back(shard_params(full, plan, r));
    std::vector<const ParamStore*> ptrs;
    for (const auto& s : shards) ptrs.push_back(&s);
    EXPECT_TRUE(merge_params(ptrs, plan) == full) << "world size " << ws;
    if (ws > 1) {
      EXPECT_FALSE(shards[1].contains("layer0.attn.out.bias"));
      EXPECT_EQ(shards[1].at("layer0.ffn.up.weight").shape(), (Shape{16, 64 / ws}));
    }
  }
}

TEST(ParallelModel, MatchesSerialAcrossSeeds) {
  const ModelConfig c = tiny_tp();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ParamStore full = init_params(c, 100 + seed);
    for (auto& [_, t] : full.all())
      for (auto& v : t.data()) v *= 5.0;  // away from the near-uniform regime
    const MlmBatch b = random_batch(c, 2, 8, 200 + seed);
    const double serial = serial_loss_and_grads(c, full, b);
    for (std::size_t ws : {1u, 2u, 4u}) {
      const auto res = run_parallel_step(c, full, b, ws);
      for (double l : res.rank_losses) EXPECT_EQ(l, res.rank_losses[0]);
      const double loss = res.rank_losses[0];
      EXPECT_LT(std::fabs(loss - serial) / std::fabs(serial), 1e-9) << "seed " << seed << " ws " << ws;
      const auto diff = compare_gradients(res.grads, full);
      EXPECT_LT(diff.max_rel, 1e-8) << diff.worst << " seed " << seed << " ws " << ws;
      if (ws == 1) {
        for (const auto& [name, g] : res.grads.all()) {
          const auto sg = full.at(name).grad();
          EXPECT_TRUE(std::equal(sg.begin(), sg.end(), g.storage().begin())) << name;
        }
      }
      if (ws == 1) {
        EXPECT_EQ(loss, serial);
      }
    }
  }
}

TEST(ParallelModel, RepeatedRunsBitwiseIdentical) {
  const ModelConfig c = tiny_tp();
  const ParamStore full = init_params(c, 9);
  const MlmBatch b = random_batch(c, 2, 8, 4);
  for (std::size_t ws : {2u, 4u}) {
    const auto a = run_parallel_step(c, full, b, ws);
    const auto d = run_parallel_step(c, full, b, ws);
    EXPECT_EQ(a.rank_losses, d.rank_losses);
    EXPECT_TRUE(a.grads == d.grads);
  }
}

TEST(ParallelModel, WorldOfOneWithDropoutMatchesSerial) {
  ModelConfig c = tiny_tp();
  c.dropout = 0.1;
  ParamStore full = init_params(c, 13);
  const MlmBatch b = random_batch(c, 2, 8, 7);
  ForwardOptions opt{true, 99, nullptr, nullptr};
  full.zero_grad();
  Tape t;
  Var loss = mlm_loss(t, c, full, b, opt);
  t.backward(loss);
  const auto res = run_parallel_step(c, full, b, 1, opt);
  EXPECT_EQ(res.rank_losses[0], loss.value().item());
}

TEST(ParallelModel, EightRanks) {
  ModelConfig c = tiny_tp();
  c.heads = 8;
  ParamStore full = init_params(c, 3);
  const MlmBatch b = random_batch(c, 2, 6, 1);
  const double serial = serial_loss_and_grads(c, full, b);
  const auto res = run_parallel_step(c, full, b, 8);
  EXPECT_LT(std::fabs(res.rank_losses[0] - serial) / serial, 1e-9);
}

TEST(CommVolume, MatchesInstrumentedCounters) {
  struct Case {
    std::size_t layers, hidden, heads, ws, batch, seq;
  };
  for (const Case k : {Case{2, 16, 4, 2, 2, 8}, Case{2, 16, 4, 4, 2, 8}, Case{1, 16, 2, 2, 3, 5},
                       Case{3, 8, 4, 4, 1, 16}, Case{2, 32, 8, 8, 2, 4}, Case{4, 16, 4, 2, 1, 6}}) {
    ModelConfig c = tiny_tp();
    c.layers = k.layers;
    c.hidden = k.hidden;
    c.heads = k.heads;
    const ParamStore full = init_params(c, 1);
    const MlmBatch b = random_batch(c, k.batch, k.seq, 3);
    const auto res = run_parallel_step(c, full, b, k.ws);
    const std::size_t predicted = target_rows(b.target_ids).size();
    const auto rep = comm_volume_report(c, make_shard_plan(c, k.ws), k.batch, k.seq, predicted);
    for (const auto& ct : res.counters) {
      EXPECT_EQ(ct.bytes, rep.total_bytes());
      EXPECT_EQ(ct.collectives, rep.collectives);
    }
  }
}

TEST(CommVolume, ClosedFormExamples) {
  ModelConfig c = tiny_tp();
  EXPECT_EQ(comm_volume_report(c, make_shard_plan(c, 1), 2, 8).total_bytes(), 0u);
  const auto two = comm_volume_report(c, make_shard_plan(c, 2), 2, 8);
  EXPECT_EQ(two.layer_bytes, 16384u);
  c.layers = 4;
  EXPECT_EQ(comm_volume_report(c, make_shard_plan(c, 2), 2, 8).layer_bytes, 2 * two.layer_bytes);
}
