"""Python access to the online video dialogue toolkit."""

import json

from ._ovd import Assistant, Config, OvdError, generate_dataset_jsonl, flops_json

__all__ = ["Assistant", "Config", "OvdError", "generate_dataset", "simulate", "evaluate", "flops"]


def generate_dataset(config, split="train"):
    """Episodes as dicts, in the dataset JSONL schema."""
    text = generate_dataset_jsonl(config, split)
    return [json.loads(line) for line in text.splitlines() if line]


def simulate(assistant, episode, slow_path=True):
    """Runs one episode online; returns the log records as dicts."""
    text = assistant.simulate_jsonl(json.dumps(episode), slow_path)
    return [json.loads(line) for line in text.splitlines()]


def evaluate(assistant, episodes, online=True):
    jsonl = "\n".join(json.dumps(e) for e in episodes)
    return json.loads(assistant.evaluate_json(jsonl, online))


def flops(config, frames=20, responses=3, response_len=3, with_template=True):
    return json.loads(flops_json(config, frames, responses, response_len, with_template))
