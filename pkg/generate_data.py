# generate_data.py
import os
import sys
import argparse
import dataclasses

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))
from data_processing.synthetic_city import SyntheticCitySpec, generate_synthetic

CITY_SEEDS = {"A": 0, "B": 1, "C": 2}


def create_directories(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def generate_cities(spec_path="configs/synthetic_city.yaml", out_dir="data/synthetic", seeds=None):
    """Write the shipped synthetic cities (same POI profiles and tasks, different seeds)"""
    spec = SyntheticCitySpec.from_yaml(spec_path)
    seeds = seeds or CITY_SEEDS
    cities = []
    for suffix, seed in seeds.items():
        city_spec = dataclasses.replace(spec, name=f"{spec.name}{suffix}")
        city = generate_synthetic(city_spec, seed, out_dir=os.path.join(out_dir, city_spec.name))
        print(f"Generated {city}")
        cities.append(city)
    return cities


def parse_args():
    parser = argparse.ArgumentParser(description="Generate the shipped synthetic cities")
    parser.add_argument("--spec", type=str, default="configs/synthetic_city.yaml", help="SyntheticCitySpec YAML")
    parser.add_argument("--out_dir", type=str, default="data/synthetic", help="Output directory")
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    out_dir = create_directories(args.out_dir)
    generate_cities(args.spec, out_dir)
    print(f"Synthetic cities written to {out_dir}")
