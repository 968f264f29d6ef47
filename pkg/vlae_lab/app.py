from vlae_lab.application.cli.typer.commands import app


def main() -> None:
    app()


if __name__ == "__main__":
    main()
