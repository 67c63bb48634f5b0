"""Walkthrough: cluster-confidence routing under an oracle budget.

After a warmup retriever has seen two of three question patterns, its
confidence cleanly separates the familiar clusters from the novel one.
The adaptive round self-labels the confident clusters for free and
spends oracle calls only on the uncertain cluster.

    python3 demos/03_adaptive_labeling.py
"""

from ragkit.clustering import ClusteringConfig, cluster_questions
from ragkit.labeler import MockLabeler
from ragkit.synthetic import adaptive_task, document_recall
from ragkit.training import AdaptiveConfig, TrainSchedule, adaptive_round, train

task = adaptive_task(seed=0)
print(f"warmup tuples: {len(task.warmup_tuples)} (two question patterns)")
print(f"unlabeled pool: {len(task.unlabeled_pairs)} (three patterns, one unseen)")

schedule = TrainSchedule(warmup_epochs=1, main_epochs=2, seed=0)
warmup = train(task.corpus, task.warmup_tuples, schedule,
               encoder_cfg=task.encoder_cfg)

questions = [q for q, _ in task.unlabeled_pairs]
clusters = cluster_questions(questions, ClusteringConfig(k=3, seed=0))
oracle = MockLabeler(seed=0)
round_result = adaptive_round(warmup.params, task.unlabeled_pairs, clusters,
                              AdaptiveConfig(policy="percentile", percentile=50.0),
                              oracle)

print(f"\nconfidence threshold (median): {round_result.report['threshold']:.3f}")
print("cluster  size  confidence  routed to")
for entry in round_result.report["clusters"]:
    route = "self-label" if entry["confident"] else "oracle"
    print(f"{entry['id']:>7}  {entry['size']:>4}  {entry['confidence']:>10.3f}"
          f"  {route}")

total = len(task.unlabeled_pairs)
print(f"\noracle calls: {oracle.calls_used} of {total} "
      f"({1 - oracle.calls_used / total:.0%} saved)")

# The saved calls cost nothing in quality here: training on the mixed
# supervision matches training on all-oracle labels.
mixed = task.warmup_tuples + round_result.self_labeled + round_result.oracle_labeled
final = train(task.corpus, mixed, schedule, encoder_cfg=task.encoder_cfg)
recall = document_recall(final.params, task.corpus, task.eval_pairs, ks=(10,))
print(f"recall@10 on held-out entities after the round: {recall[10]:.3f}")
