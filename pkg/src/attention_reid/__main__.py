# src/attention_reid/__main__.py

from .cli import main

raise SystemExit(main())
