"""Edge-labeling graph neural network for few-shot classification."""
