from dcdl.cli import main

raise SystemExit(main())
