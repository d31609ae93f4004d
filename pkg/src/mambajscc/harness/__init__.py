"""Training, evaluation sweeps, complexity accounting and data ingestion."""
