# Familiarity models: Neural Bloom Filter and one-shot baselines
