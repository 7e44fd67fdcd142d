function seqSum(ints: seq<int>): int {
  if |ints| == 0 then 0 else ints[0] + seqSum(ints[1..])
}

predicate IsMaxSubSum(ints: seq<int>, maxSum: int) {
  (exists s, e :: 0 <= s <= e <= |ints| && seqSum(ints[s..e]) == maxSum) &&
  (forall s, e :: 0 <= s <= e <= |ints| ==> seqSum(ints[s..e]) <= maxSum)
}

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
    var curr := 0;
    var slice := ints[start..];
    for end := 0 to |slice|
      invariant curr == seqSum(slice[..end])
      invariant 0 <= maxSum
      invariant exists s, e :: 0 <= s <= e <= |ints| && seqSum(ints[s..e]) == maxSum
      invariant forall s, e :: 0 <= s < start && s <= e <= |ints| ==> seqSum(ints[s..e]) <= maxSum
      invariant forall e :: start <= e <= start + end ==> seqSum(ints[start..e]) <= maxSum
    {
      lemmaSeqSumExtend(slice[..end+1]);
      assert slice[..end+1][..end] == slice[..end];
      curr := curr + slice[end];
      assert slice[..end+1] == ints[start..start+end+1];
      assert seqSum(ints[start..start+end+1]) == curr;
      maxSum := if curr > maxSum then curr else maxSum;
    }
  }
  return maxSum;
}
