"""CURLoRA adapters and a desk-scale continual-learning harness."""
