"""Authored model replies for the MaxSub walkthrough.

``responder`` answers by template id and substitutions only, so the same
replies drive scripted runs and the cassette generator.
"""

from __future__ import annotations

from pathlib import Path

HERE = Path(__file__).parent

PLANS = {
    "decoupled": """\
method MaxSubImpl(ints: seq<int>) returns (maxSum: int)
  ensures IsMaxSubSum(ints, maxSum)
{
  maxSum := 0;
  for start := 0 to |ints| {
    var localMax := MaxSubImpl_loop1(ints, start);
    maxSum := if localMax > maxSum then localMax else maxSum;
  }
  return maxSum;
}

method MaxSubImpl_loop1(ints: seq<int>, start: int) returns (localMax: int)
  requires 0 <= start < |ints|
  ensures 0 <= localMax
  ensures exists e :: start <= e <= |ints| && seqSum(ints[start..e]) == localMax
  ensures forall e :: start <= e <= |ints| ==> seqSum(ints[start..e]) <= localMax
{
  localMax := 0;
  var curr := 0;
  var slice := ints[start..];
  for end := 0 to |slice| {
    curr := curr + slice[end];
    localMax := if curr > localMax then curr else localMax;
  }
}
""",
    "full-sharing": """\
method MaxSubImpl(ints: seq<int>) returns (maxSum: int)
  ensures IsMaxSubSum(ints, maxSum)
{
  maxSum := 0;
  for start := 0 to |ints| {
    maxSum := MaxSubImpl_loop1(ints, start, maxSum);
  }
  return maxSum;
}

method MaxSubImpl_loop1(ints: seq<int>, start: int, maxSum: int) returns (newMax: int)
  requires 0 <= start < |ints|
  requires 0 <= maxSum
  ensures maxSum <= newMax
  ensures newMax == maxSum || exists e :: start <= e <= |ints| && seqSum(ints[start..e]) == newMax
  ensures forall e :: start <= e <= |ints| ==> seqSum(ints[start..e]) <= newMax
{
  newMax := maxSum;
  var curr := 0;
  var slice := ints[start..];
  for end := 0 to |slice| {
    curr := curr + slice[end];
    newMax := if curr > newMax then curr else newMax;
  }
}
""",
    "fully-decoupled": """\
method MaxSubImpl(ints: seq<int>) returns (maxSum: int)
  ensures IsMaxSubSum(ints, maxSum)
{
  maxSum := 0;
  for start := 0 to |ints| {
    var localMax := MaxSubImpl_loop1(ints[start..]);
    maxSum := if localMax > maxSum then localMax else maxSum;
  }
  return maxSum;
}

method MaxSubImpl_loop1(slice: seq<int>) returns (localMax: int)
  ensures 0 <= localMax
  ensures exists e :: 0 <= e <= |slice| && seqSum(slice[..e]) == localMax
  ensures forall e :: 0 <= e <= |slice| ==> seqSum(slice[..e]) <= localMax
{
  localMax := 0;
  var curr := 0;
  for end := 0 to |slice| {
    curr := curr + slice[end];
    localMax := if curr > localMax then curr else localMax;
  }
}
""",
}

OUTER_ANNOTATED = """\
method MaxSubImpl(ints: seq<int>) returns (maxSum: int)
  ensures IsMaxSubSum(ints, maxSum)
{
  maxSum := 0;
  assert seqSum(ints[0..0]) == 0;
  for start := 0 to |ints|
    invariant 0 <= maxSum
    invariant exists s, e :: 0 <= s <= e <= |ints| && seqSum(ints[s..e]) == maxSum
    invariant forall s, e :: 0 <= s < start && s <= e <= |ints| ==> seqSum(ints[s..e]) <= maxSum
  {
    var localMax := MaxSubImpl_loop1(ints, start);
    maxSum := if localMax > maxSum then localMax else maxSum;
  }
  return maxSum;
}
"""

LOOP1_ANNOTATED = """\
method MaxSubImpl_loop1(ints: seq<int>, start: int) returns (localMax: int)
  requires 0 <= start < |ints|
  ensures 0 <= localMax
  ensures exists e :: start <= e <= |ints| && seqSum(ints[start..e]) == localMax
  ensures forall e :: start <= e <= |ints| ==> seqSum(ints[start..e]) <= localMax
{
  localMax := 0;
  var curr := 0;
  var slice := ints[start..];
  assert seqSum(ints[start..start]) == 0;
  for end := 0 to |slice|
    invariant curr == seqSum(slice[..end])
    invariant 0 <= localMax
    invariant exists e :: start <= e <= |ints| && seqSum(ints[start..e]) == localMax
    invariant forall e :: start <= e <= start + end ==> seqSum(ints[start..e]) <= localMax
  {
    assert slice[..end+1][..end] == slice[..end];
    curr := curr + slice[end];
    assert slice[..end+1] == ints[start..start+end+1];
    localMax := if curr > localMax then curr else localMax;
  }
}
"""

LEMMA_SIGNATURE = """\
lemma lemmaSeqSumExtend(ints: seq<int>)
  requires |ints| > 0
  ensures seqSum(ints) == seqSum(ints[..|ints|-1]) + ints[|ints|-1]
"""

LEMMA_CALL = "lemmaSeqSumExtend(slice[..end+1]);"

LEMMA_BODY = """\
lemma lemmaSeqSumExtend(ints: seq<int>)
  requires |ints| > 0
  ensures seqSum(ints) == seqSum(ints[..|ints|-1]) + ints[|ints|-1]
{
  if |ints| > 1 {
    lemmaSeqSumExtend(ints[1..]);
    assert ints[1..][..|ints|-2] == ints[1..|ints|-1];
    assert ints[..|ints|-1][1..] == ints[1..|ints|-1];
  }
}
"""


def restored_method() -> str:
    text = (HERE / "maxsub_annotated.dfy").read_text()
    return text[text.index("method MaxSubImpl") :]


def fence(code: str) -> str:
    return "```dafny\n" + code.rstrip("\n") + "\n```\n"


def responder(template_id: str, subs: dict, temperature: float) -> str:
    base = template_id.split("/")[0]
    if base == "decompose-code":
        return "Here is the refactoring.\n\n" + fence(PLANS[subs["strategy"]])
    if base == "decomposition-consistency-check":
        return "Yes\nEach extracted contract is implied by its loop and suffices for the caller."
    if base == "verifiability-gate":
        return "Yes"
    if base == "augment-annotations":
        name = subs["name"]
        if name == "MaxSubImpl":
            return fence(OUTER_ANNOTATED)
        if name == "MaxSubImpl_loop1":
            return fence(LOOP1_ANNOTATED)
        raise KeyError(name)
    if base == "generate-body-and-annotations":
        return fence(LEMMA_BODY)
    if base == "propose-sublemma-for-invariant":
        return fence(LEMMA_SIGNATURE) + "\n" + fence(LEMMA_CALL)
    if base == "merge-and-restore":
        return fence(restored_method())
    raise KeyError(template_id)
