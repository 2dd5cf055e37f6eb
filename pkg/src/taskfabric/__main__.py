from taskfabric.cli import main

raise SystemExit(main())
