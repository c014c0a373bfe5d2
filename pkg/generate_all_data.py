# generate_all_data.py
import os
import sys
import time

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))


def generate_all_data(out_dir="output/synthetic", data_dir="data/synthetic", config="configs/synthetic.yaml"):
    """
    Run the UrbanVerse pipeline on the synthetic cities in the correct order:
    1. Synthetic cities A, B, C
    2. Grid and walks
    3. Cell encoder pretraining on A and B
    4. Cell and region embeddings for all cities
    5. Diffusion head on A and B
    6. Predictions and metrics for the held-out city C

    Each step reads what the step before it wrote.
    """
    print("=" * 80)
    print("UrbanVerse Synthetic Pipeline")
    print("=" * 80)

    os.makedirs(out_dir, exist_ok=True)
    from execution.pipeline import UrbanPipeline
    from execution.run_config import RunConfig

    # Step 1: Generate synthetic cities
    print("\nStep 1: Generating synthetic cities...")
    try:
        from generate_data import generate_cities
        cities = generate_cities(out_dir=data_dir)
        print(f"Successfully generated {len(cities)} cities in {data_dir}")
    except Exception as e:
        print(f"Error generating synthetic cities: {e}")
        sys.exit(1)

    names = [city.name for city in cities]
    pipeline = UrbanPipeline(RunConfig.from_yaml(config), out_dir=out_dir,
                             city_dirs=[os.path.join(data_dir, n) for n in names],
                             train_cities=names[:-1], test_city=names[-1]).set_defaults()

    steps = [
        ("Gridding cities and sampling walks", lambda: (pipeline.run_grid(), pipeline.run_walks())),
        ("Pretraining the cell encoder", pipeline.run_pretrain),
        ("Extracting cell and region embeddings", lambda: (pipeline.run_embed(), pipeline.run_aggregate())),
        ("Training the diffusion head", pipeline.run_train),
        ("Predicting and scoring the held-out city", lambda: (pipeline.run_predict(), pipeline.run_eval())),
    ]
    for i, (title, step) in enumerate(steps, start=2):
        print(f"\nStep {i}: {title}...")
        start = time.time()
        try:
            result = step()
        except Exception as e:
            print(f"Error in step {i}: {e}")
            sys.exit(1)
        print(f"Done in {time.time() - start:.1f}s")

    print("\nHeld-out city metrics:")
    for report, coverage in result[1]:
        print(f"- {report}, band coverage {coverage:.3f}")

    print("\n" + "=" * 80)
    print("Pipeline Complete")
    print("=" * 80)


if __name__ == "__main__":
    generate_all_data()
