from fedalign.cli import main

raise SystemExit(main())
