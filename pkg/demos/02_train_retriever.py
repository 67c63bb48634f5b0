"""Walkthrough: dual-encoder training on a separable synthetic corpus.

Every query shares exactly one rare token with its gold document, so a
retriever that learns the hashed-feature alignment can solve held-out
queries it never trained on. Training runs the two-phase schedule:
a warmup epoch with in-batch negatives, then main epochs over mined
hard negatives. Takes a few seconds.

    python3 demos/02_train_retriever.py
"""

from ragkit import init_params
from ragkit.synthetic import document_recall, separable_task
from ragkit.training import TrainSchedule, train

task = separable_task(num_docs=200, num_queries=80, seed=0)
print(f"corpus: {len(task.corpus)} docs, {len(task.train_tuples)} training "
      f"tuples, {len(task.eval_pairs)} held-out queries")
doc = next(iter(task.corpus))
print(f"sample doc:   {doc.text!r}")
print(f"sample query: {task.train_tuples[0].question!r}")

before = document_recall(init_params(task.encoder_cfg, seed=0), task.corpus,
                         task.eval_pairs, ks=(1, 10))
print(f"\nuntrained held-out recall@1 = {before[1]:.3f}, "
      f"recall@10 = {before[10]:.3f}")

schedule = TrainSchedule()
result = train(task.corpus, task.train_tuples, schedule,
               encoder_cfg=task.encoder_cfg)
print(f"\ntrained {schedule.warmup_epochs} warmup + {schedule.main_epochs} "
      f"main epochs ({result.refresh_count} hard-negative refreshes)")
print("epoch  split    loss_list  loss_pair")
for row in result.history:
    print(f"{row.epoch:>5}  {row.split:<7}  {row.loss_list:>9.4f}  "
          f"{row.loss_pair:>9.4f}")

after = document_recall(result.params, task.corpus, task.eval_pairs, ks=(1, 10))
print(f"\ntrained held-out recall@1 = {after[1]:.3f}, "
      f"recall@10 = {after[10]:.3f}")
