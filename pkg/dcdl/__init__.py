"""Class-wise discrepancy losses, entropic optimal transport and embedding evaluation."""
