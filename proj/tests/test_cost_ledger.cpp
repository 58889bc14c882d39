#include <gtest/gtest.h>

#include "gcq/cost_ledger.hpp"

using namespace gcq;

TEST(CostLedger, SpendFormula) {
  CostLedger l;
  l.charge(1000, 0);
  l.charge(0, 500);
  EXPECT_DOUBLE_EQ(l.spend(), 1.0 * 0.0015 + 0.5 * 0.002);
  EXPECT_EQ(l.requests(), 2u);
}

TEST(CostLedger, RequireRejectsWithoutRecording) {
  CostLedger l;
  l.budget = 0.0;
  EXPECT_THROW(l.require(1, 0), BudgetExceeded);
  EXPECT_EQ(l.snapshot(), LedgerSnapshot{});
  EXPECT_NO_THROW(l.require(0, 0));
}

TEST(CostLedger, RequestBudget) {
  CostLedger l;
  l.max_requests = 2;
  l.require(0, 0);
  l.charge(0, 0);
  l.require(0, 0);
  l.charge(0, 0);
  EXPECT_THROW(l.require(0, 0), BudgetExceeded);
}

TEST(CostLedger, SnapshotDifferenceAndMerge) {
  CostLedger a;
  a.charge(10, 2);
  const auto s0 = a.snapshot();
  a.charge(5, 3);
  const auto d = a.snapshot() - s0;
  EXPECT_EQ(d.prompt_tokens, 5u);
  EXPECT_EQ(d.completion_tokens, 3u);
  EXPECT_EQ(d.requests, 1u);
  CostLedger b;
  b.merge(a.snapshot());
  EXPECT_EQ(b.snapshot(), a.snapshot());
}
